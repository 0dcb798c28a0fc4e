"""Easy/hard partition by dual-space agreement and kNN reassessment of hard samples."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .pseudolabel import EPS, PseudoLabels

logger = logging.getLogger(__name__)


@dataclass
class MemoryBank:
    """Unit-norm target features split by label agreement.

    ``easy_idx``/``hard_idx`` are original sample indices; ``easy_labels`` are
    the agreed labels. ``degraded`` is set when no sample was easy.
    """

    easy_feats: np.ndarray
    easy_labels: np.ndarray
    easy_idx: np.ndarray
    hard_feats: np.ndarray
    hard_idx: np.ndarray
    hard_labels_c: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    built_at_epoch: int = 0
    degraded: bool = False

    @property
    def n_easy(self) -> int:
        return len(self.easy_idx)

    @property
    def n_hard(self) -> int:
        return len(self.hard_idx)

    @property
    def size(self) -> int:
        return self.n_easy + self.n_hard

    def easy_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.easy_idx] = True
        return mask


def partition(labels_c: PseudoLabels, labels_g: PseudoLabels, feats, epoch: int = 0) -> MemoryBank:
    """Samples whose classifier-space and assistant-space labels agree are easy."""
    yc = np.asarray(labels_c.labels)
    yg = np.asarray(labels_g.labels)
    feats = np.asarray(feats, dtype=np.float64)
    if yc.shape != yg.shape or len(yc) != len(feats):
        raise ValueError(f"label/feature lengths differ: {yc.shape}, {yg.shape}, {feats.shape}")
    unit = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), EPS)
    agree = yc == yg
    easy_idx = np.flatnonzero(agree)
    hard_idx = np.flatnonzero(~agree)
    bank = MemoryBank(easy_feats=unit[easy_idx], easy_labels=yc[easy_idx].astype(np.int64), easy_idx=easy_idx,
                      hard_feats=unit[hard_idx], hard_idx=hard_idx, hard_labels_c=yc[hard_idx].astype(np.int64),
                      built_at_epoch=epoch)
    if len(easy_idx) == 0:
        bank.degraded = True
        logger.warning("epoch %d: no consistent samples, falling back to classifier-space labels", epoch)
    return bank


def rating_matrix(bank: MemoryBank) -> np.ndarray:
    """Hard x easy cosine similarities (rows are unit vectors already)."""
    if bank.n_easy == 0 or bank.n_hard == 0:
        return np.zeros((bank.n_hard, bank.n_easy))
    return bank.hard_feats @ bank.easy_feats.T


def reassess_hard(S, easy_labels, k: int) -> np.ndarray:
    """Majority vote over the ``k`` most similar easy samples of each hard row.

    Vote ties go to the class with the larger summed similarity, then to the
    smaller class index. Equal similarities are ranked by easy-column index.
    """
    S = np.asarray(S, dtype=np.float64)
    easy_labels = np.asarray(easy_labels, dtype=np.int64)
    n, m = S.shape
    if n == 0 or m == 0:
        return np.zeros(n, dtype=np.int64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= m:
        new_k = max(1, m - 1)
        if new_k != k:
            logger.warning("k=%d not below easy-bank size %d; clamped to %d", k, m, new_k)
        k = new_k
    n_cls = int(easy_labels.max()) + 1
    # stable sort on -S keeps the lower column first among equal similarities
    order = np.argsort(-S, axis=1, kind="stable")[:, :k]
    top_labels = easy_labels[order]
    top_sims = np.take_along_axis(S, order, axis=1)
    counts = np.zeros((n, n_cls), dtype=np.int64)
    sums = np.zeros((n, n_cls))
    rows = np.repeat(np.arange(n), k)
    np.add.at(counts, (rows, top_labels.ravel()), 1)
    np.add.at(sums, (rows, top_labels.ravel()), top_sims.ravel())
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.flatnonzero(counts[i] == counts[i].max())
        if len(best) > 1:
            s = sums[i, best]
            best = best[s == s.max()]
        out[i] = best[0]
    return out


def final_labels(bank: MemoryBank, reassessed) -> PseudoLabels:
    """Scatter easy and reassessed hard labels back to original sample order."""
    reassessed = np.asarray(reassessed, dtype=np.int64)
    if len(reassessed) != bank.n_hard:
        raise RuntimeError(f"{len(reassessed)} reassessed labels for {bank.n_hard} hard samples")
    out = np.full(bank.size, -1, dtype=np.int64)
    out[bank.easy_idx] = bank.easy_labels
    out[bank.hard_idx] = reassessed
    if np.any(out < 0):
        raise RuntimeError("easy and hard banks do not cover every sample")
    return PseudoLabels(labels=out, space_tag="final")


def consistent_labels(labels_c: PseudoLabels, labels_g: PseudoLabels, feats, k: int = 5, epoch: int = 0):
    """Partition, reassess and assemble. Returns ``(bank, final PseudoLabels)``.

    In degraded mode (nothing easy) every sample keeps its classifier label.
    """
    bank = partition(labels_c, labels_g, feats, epoch)
    if bank.degraded:
        return bank, PseudoLabels(labels=np.asarray(labels_c.labels, dtype=np.int64).copy(), space_tag="final")
    hard = reassess_hard(rating_matrix(bank), bank.easy_labels, k) if bank.n_hard else np.zeros(0, dtype=np.int64)
    return bank, final_labels(bank, hard)
