"""Target-stage objectives: information maximization, consistency CE, CMK-MMD."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_EPS = 1e-12
BANDWIDTH_FLOOR = 1e-12


@dataclass
class KernelSpec:
    """Gaussian kernel family for CMK-MMD.

    Kernel ``u`` has bandwidth ``sigma_u = multipliers[u] * sigma`` where
    ``sigma**2`` is the median pairwise squared distance of the pooled samples
    (or ``fixed_sigma2`` when given). ``weights`` default to uniform.
    """

    multipliers: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    weights: Optional[Tuple[float, ...]] = None
    fixed_sigma2: Optional[float] = None
    pooled: bool = False

    def __post_init__(self):
        self.multipliers = tuple(float(m) for m in self.multipliers)
        if not self.multipliers:
            raise ValueError("KernelSpec needs at least one bandwidth multiplier")
        if self.weights is None:
            self.weights = tuple(1.0 / len(self.multipliers) for _ in self.multipliers)
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != len(self.multipliers):
            raise ValueError("one kernel weight per multiplier required")
        if any(w < 0 for w in self.weights):
            raise ValueError("kernel weights must be non-negative")
        if any(m <= 0 for m in self.multipliers):
            raise ValueError("bandwidth multipliers must be positive")


@dataclass
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def im_loss(z: Tensor) -> Tensor:
    """Mean per-sample prediction entropy plus negative entropy of the mean prediction."""
    if z.shape[0] < 1:
        raise ValueError("im_loss needs a non-empty batch")
    logp = T.log_softmax(z, axis=-1)
    p = T.exp(logp)
    ent = T.mean(T.mul(T.tsum(T.mul(p, logp), axis=-1), -1.0))
    p_bar = T.mean(p, axis=0)
    div = T.tsum(T.mul(p_bar, T.log(T.add(p_bar, LOG_EPS))))
    return T.add(ent, div)


def cross_entropy(z: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    C = z.shape[-1]
    if labels.shape != (z.shape[0],):
        raise ValueError(f"expected {z.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros(z.shape, dtype=z.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return T.mean(T.mul(T.tsum(T.mul(T.log_softmax(z, axis=-1), onehot), axis=-1), -1.0))


def cst_loss(z_t: Tensor, z_a: Tensor, labels) -> Tensor:
    """Cross-entropy of both heads against the same pseudo-labels."""
    return T.add(cross_entropy(z_a, labels), cross_entropy(z_t, labels))


def _canonical(x: Tensor, idx: np.ndarray) -> Tensor:
    # lexicographic row order makes the estimate independent of input order
    rows = x.data[idx]
    order = np.lexsort(rows.T[::-1]) if len(idx) > 1 else np.arange(len(idx))
    return T.take_rows(x, idx[order])


def _pairwise_sq(z: Tensor) -> Tensor:
    diff = T.sub(z.reshape(z.shape[0], 1, z.shape[1]), z.reshape(1, z.shape[0], z.shape[1]))
    return T.tsum(T.mul(diff, diff), axis=-1)


def _median_offdiag(d2: Tensor) -> Tensor:
    n = d2.shape[0]
    iu = np.triu_indices(n, k=1)
    vals = d2[iu]
    order = np.argsort(vals.data, kind="stable")
    m = len(order)
    if m % 2:
        med = vals[order[m // 2]]
    else:
        med = T.mul(T.add(vals[order[m // 2 - 1]], vals[order[m // 2]]), 0.5)
    if float(med.data) < BANDWIDTH_FLOOR:
        return Tensor(np.asarray(BANDWIDTH_FLOOR, dtype=d2.dtype))
    return med


def _kernel(d2: Tensor, spec: KernelSpec) -> Tensor:
    base = Tensor(np.asarray(spec.fixed_sigma2, dtype=d2.dtype)) if spec.fixed_sigma2 else _median_offdiag(d2)
    total = None
    for mult, w in zip(spec.multipliers, spec.weights):
        scale = T.mul(base, -2.0 * mult * mult)
        term = T.mul(T.exp(T.div(d2, scale)), w)
        total = term if total is None else T.add(total, term)
    return total


def mmd2(x: Tensor, y: Tensor, spec: KernelSpec) -> Tensor:
    """Biased multi-kernel MMD^2 between two samples (rows)."""
    n = x.shape[0]
    z = T.concatenate([x, y], axis=0)
    K = _kernel(_pairwise_sq(z), spec)
    kxx = T.mean(K[:n, :n])
    kyy = T.mean(K[n:, n:])
    kxy = T.mean(K[:n, n:])
    return T.sub(T.add(kxx, kyy), T.mul(kxy, 2.0))


def cmk_mmd(easy_feats: Tensor, easy_labels, hard_feats: Tensor, hard_labels,
            spec: Optional[KernelSpec] = None):
    """Class-conditional multi-kernel MMD between easy and hard features.

    Per class present on both sides, the biased MMD^2 of the class subsets is
    computed with a bandwidth from that class's pooled subset; the result is
    the mean over shared classes. Returns ``(loss, skipped)``; ``skipped`` is
    True (and the loss a constant zero) when no class is shared.
    """
    spec = spec or KernelSpec()
    easy_labels = np.asarray(easy_labels, dtype=np.int64)
    hard_labels = np.asarray(hard_labels, dtype=np.int64)
    dtype = easy_feats.dtype
    shared = np.intersect1d(easy_labels, hard_labels)
    if easy_feats.shape[0] == 0 or hard_feats.shape[0] == 0 or len(shared) == 0:
        return Tensor(np.asarray(0.0, dtype=dtype)), True
    if spec.pooled:
        return _pooled_mmd(easy_feats, easy_labels, hard_feats, hard_labels, spec), False
    total = None
    for c in shared:
        x = _canonical(easy_feats, np.flatnonzero(easy_labels == c))
        y = _canonical(hard_feats, np.flatnonzero(hard_labels == c))
        term = mmd2(x, y, spec)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / len(shared)), False


def _pooled_mmd(easy_feats, easy_labels, hard_feats, hard_labels, spec):
    # label-indicator product kernel over the whole banks
    ie = np.lexsort(np.c_[easy_feats.data, easy_labels].T[::-1])
    ih = np.lexsort(np.c_[hard_feats.data, hard_labels].T[::-1])
    x, y = T.take_rows(easy_feats, ie), T.take_rows(hard_feats, ih)
    lab = np.concatenate([easy_labels[ie], hard_labels[ih]])
    same = (lab[:, None] == lab[None, :]).astype(easy_feats.dtype)
    n = x.shape[0]
    K = T.mul(_kernel(_pairwise_sq(T.concatenate([x, y], axis=0)), spec), same)
    return T.sub(T.add(T.mean(K[:n, :n]), T.mean(K[n:, n:])), T.mul(T.mean(K[:n, n:]), 2.0))


def total_loss(l_im: Tensor, l_cst, l_cmk, weights: LossWeights) -> Tensor:
    """``L_im + alpha * L_cst + beta * L_cmk``."""
    return T.add(T.add(l_im, T.mul(l_cst, weights.alpha)), T.mul(l_cmk, weights.beta))
