"""Dynamic centroid evaluation: soft centroids, cosine assignment, EMA refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-12


class EmptyInputError(ValueError):
    pass


@dataclass
class CentroidSet:
    centroids: np.ndarray
    momentum: float = 0.9
    refine_rounds: int = 2
    degenerate: bool = False


@dataclass
class PseudoLabels:
    labels: np.ndarray
    space_tag: str = "classifier"

    def __len__(self) -> int:
        return len(self.labels)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), EPS)


def init_centroids(feats, logits) -> np.ndarray:
    """Softmax-weighted class means, shape (C, F)."""
    feats = np.asarray(feats, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if feats.shape[0] == 0:
        raise EmptyInputError("cannot initialise centroids from zero samples")
    p = _softmax(logits)
    return (p.T @ feats) / np.maximum(p.sum(axis=0), EPS)[:, None]


def assign_labels(feats, centroids) -> np.ndarray:
    """Nearest centroid by cosine distance; ties go to the smaller class index."""
    sim = _unit_rows(np.asarray(feats, dtype=np.float64)) @ _unit_rows(np.asarray(centroids, dtype=np.float64)).T
    return np.argmin(1.0 - sim, axis=1)


def refine(feats, labels, previous) -> np.ndarray:
    """Hard class means; a class with no members keeps its previous centroid."""
    feats = np.asarray(feats, dtype=np.float64)
    out = np.array(previous, dtype=np.float64, copy=True)
    for k in range(out.shape[0]):
        members = labels == k
        if members.any():
            out[k] = feats[members].mean(axis=0)
        else:
            logger.info("class %d has no members; keeping previous centroid", k)
    return out


def evaluate(feats, logits, momentum: float = 0.9, rounds: int = 2, space_tag: str = "classifier") -> PseudoLabels:
    """Initial soft centroids, then ``rounds`` of refine / EMA-blend / reassign."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    feats = np.asarray(feats, dtype=np.float64)
    c = init_centroids(feats, logits)
    if np.any(np.linalg.norm(c, axis=1) < EPS):
        logger.warning("zero centroid after initialisation (%s space)", space_tag)
    labels = assign_labels(feats, c)
    for _ in range(rounds):
        c_new = refine(feats, labels, c)
        c = momentum * c + (1.0 - momentum) * c_new
        labels = assign_labels(feats, c)
    return PseudoLabels(labels=labels.astype(np.int64), space_tag=space_tag)
