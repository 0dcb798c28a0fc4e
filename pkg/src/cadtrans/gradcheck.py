"""Finite-difference verification of the training objectives.

Every check runs in float64: analytic gradients from one backward pass are
compared with central differences ``(f(p + h) - f(p - h)) / 2h`` on randomly
sampled scalar parameter entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses
from . import tensor as T
from .adm import AdmConfig, distill_loss
from .backbone import BackboneConfig
from .model import build_model, forward, matched_adm_config
from .params import ADM_PREFIXES, FEATURE_PREFIXES, ModelState
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude both gradients count as zero and the error is absolute
FLOOR = 1e-6

LOSS_NAMES = ("L_kd", "L_im", "L_cst", "L_cmk", "L_total")


def relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class CheckResult:
    name: str
    entries: List[Tuple[str, tuple, float, float, float]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def sample_entries(model: ModelState, prefixes: Tuple[str, ...], count: int,
                   rng: np.random.Generator) -> List[Tuple[str, tuple]]:
    """Draw ``count`` distinct scalar entries uniformly over the named group."""
    names = model.names(prefixes)
    sizes = np.array([model[n].size for n in names])
    total = int(sizes.sum())
    if count > total:
        raise ValueError(f"asked for {count} entries from a group of {total}")
    flat = np.sort(rng.choice(total, size=count, replace=False))
    bounds = np.cumsum(sizes)
    out = []
    for f in flat:
        i = int(np.searchsorted(bounds, f, side="right"))
        offset = int(f - (bounds[i - 1] if i else 0))
        out.append((names[i], np.unravel_index(offset, model[names[i]].shape)))
    return out


def check_entries(fn: Callable[[], Tensor], model: ModelState, entries: Sequence[Tuple[str, tuple]],
                  name: str, h: float = STEP) -> CheckResult:
    """Compare backward-pass gradients of scalar ``fn()`` with central differences."""
    model.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {}
    for pname, idx in entries:
        g = model[pname].grad
        analytic[(pname, idx)] = 0.0 if g is None else float(g.data[idx])
    result = CheckResult(name)
    with T.no_grad():
        for pname, idx in entries:
            data = model[pname].data
            orig = data[idx]
            data[idx] = orig + h
            up = float(fn().data)
            data[idx] = orig - h
            down = float(fn().data)
            data[idx] = orig
            num = (up - down) / (2 * h)
            a = analytic[(pname, idx)]
            result.entries.append((pname, tuple(int(i) for i in idx), a, num, relative_error(a, num)))
    model.zero_grad()
    return result


def toy_problem(seed: int = 0, batch: int = 12):
    """Small float64 model, random images and fixed labels/partition for the checks."""
    rng = np.random.default_rng(seed)
    bcfg = BackboneConfig()
    acfg = matched_adm_config(bcfg, AdmConfig())
    model = build_model(bcfg, acfg, seed=seed, dtype=np.float64)
    images = rng.uniform(0.0, 1.0, size=(batch, bcfg.in_channels, bcfg.image_side, bcfg.image_side))
    C = bcfg.num_classes
    labels = np.arange(batch) % C
    rng.shuffle(labels)
    # about half of each class is easy, so every class shows up on both sides
    easy = np.zeros(batch, dtype=bool)
    for c in range(C):
        rows = np.flatnonzero(labels == c)
        easy[rows[: max(1, len(rows) // 2)]] = True
    return model, images, labels, easy


def loss_closures(model: ModelState, images: np.ndarray, labels: np.ndarray, easy: np.ndarray,
                  weights: Optional[losses.LossWeights] = None,
                  kernel: Optional[losses.KernelSpec] = None) -> Dict[str, Callable[[], Tensor]]:
    """Scalar closures for each objective at the current parameter values."""
    weights = weights or losses.LossWeights()
    kernel = kernel or losses.KernelSpec()
    x = Tensor(images)
    e_rows, h_rows = np.flatnonzero(easy), np.flatnonzero(~easy)

    def kd():
        out = forward(x, model, "train", detach_adm_input=True)
        return distill_loss(out.f_a, out.f_t, out.z_a, out.z_t, model.adm_cfg.squared_feature_loss)

    def parts():
        out = forward(x, model, "eval")
        l_im = losses.im_loss(out.z_t)
        l_cst = losses.cst_loss(out.z_t, out.z_a, labels)
        l_cmk, _ = losses.cmk_mmd(T.take_rows(out.f_t, e_rows), labels[e_rows],
                                  T.take_rows(out.f_t, h_rows), labels[h_rows], kernel)
        return l_im, l_cst, l_cmk

    return {
        "L_kd": kd,
        "L_im": lambda: parts()[0],
        "L_cst": lambda: parts()[1],
        "L_cmk": lambda: parts()[2],
        "L_total": lambda: losses.total_loss(*parts(), weights),
    }


def run_suite(seed: int = 0, samples: int = 32, h: float = STEP) -> Dict[str, CheckResult]:
    """Check all five objectives on a toy model.

    ``L_kd`` is sampled from ADM parameters (its teacher and input are
    detached, so it moves nothing else); the target-stage objectives are
    sampled from the feature extractor, which is what stage 2 trains.
    """
    model, images, labels, easy = toy_problem(seed)
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    rng = np.random.default_rng(seed + 100)
    closures = loss_closures(model, images, labels, easy)
    results = {}
    for name in LOSS_NAMES:
        prefixes = ADM_PREFIXES if name == "L_kd" else FEATURE_PREFIXES
        entries = sample_entries(model, prefixes, samples, rng)
        results[name] = check_entries(closures[name], model, entries, name, h)
        # train-mode forwards update running statistics; keep the model fixed
        for k, v in buffers.items():
            model.buffers[k][...] = v
    return results
