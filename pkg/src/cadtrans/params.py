"""Named parameter storage shared by the backbone, classifier and ADM."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, Optional, Set, Tuple

import numpy as np

from .tensor import Tensor

# name prefixes of the three parameter groups
FEATURE_PREFIXES = ("backbone.", "head.")
CLASSIFIER_PREFIXES = ("classifier.",)
ADM_PREFIXES = ("adm.",)


@dataclass
class ModelState:
    """Parameters, batch-norm buffers, frozen flags and optimizer momentum.

    Parameter names are dotted paths. The prefix decides the group:
    ``backbone.``/``head.`` form the feature extractor, ``classifier.`` the
    linear classifier and ``adm.`` the assistant domain module.
    """

    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: Set[str] = field(default_factory=set)
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    backbone_cfg: Any = None
    adm_cfg: Any = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(value, requires_grad=True)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = value

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def names(self, prefixes: Optional[Tuple[str, ...]] = None) -> list:
        if prefixes is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefixes)]

    def num_params(self, prefixes: Optional[Tuple[str, ...]] = None) -> int:
        return int(sum(self.params[n].size for n in self.names(prefixes)))

    def freeze(self, prefixes: Tuple[str, ...]) -> None:
        for n in self.names(prefixes):
            self.frozen.add(n)
            self.params[n].requires_grad = False
            self.params[n].grad = None

    def unfreeze_all(self) -> None:
        for n in self.frozen:
            self.params[n].requires_grad = True
        self.frozen.clear()

    def trainable(self) -> Iterator[Tuple[str, Tensor]]:
        for n, p in self.params.items():
            if n not in self.frozen:
                yield n, p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ModelState":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        out = ModelState(backbone_cfg=self.backbone_cfg, adm_cfg=self.adm_cfg)
        for n, p in self.params.items():
            out.params[n] = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
        out.buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        out.frozen = set(self.frozen)
        out.momentum = {n: m.astype(dtype) for n, m in self.momentum.items()}
        return out

    def copy(self) -> "ModelState":
        return self.astype(self.dtype)

    def snapshot(self, prefixes: Optional[Tuple[str, ...]] = None) -> Dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in self.names(prefixes)}


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out)).astype(dtype)
    return w, np.zeros(fan_out, dtype=dtype)


def init_conv(rng: np.random.Generator, cin: int, cout: int, k: int, dtype) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k)).astype(dtype)


def iter_tensors(model: ModelState, names: Iterable[str]) -> Iterator[Tensor]:
    for n in names:
        yield model.params[n]


__all__ = [
    "ModelState",
    "FEATURE_PREFIXES",
    "CLASSIFIER_PREFIXES",
    "ADM_PREFIXES",
    "init_linear",
    "init_conv",
]
