"""Synthetic two-domain bar-pattern images with easy/hard target subpopulations.

Each class is a small arrangement of bars (a single bar, a cross, a parallel
pair or a corner) at a class-specific angle and position. Source images
jitter the template slightly. Target "easy" images add mild noise and a
brightness shift; target "hard" images additionally turn the pattern by
30-60 degrees about its own centre, blank a 4x4 patch and add strong noise.
Shape and position survive the rotation, so the class stays recognisable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np


@dataclass
class DomainSpec:
    num_classes: int = 4
    samples_per_class: int = 100
    image_side: int = 16
    bar_length: float = 8.0
    bar_halfwidth: float = 1.0
    position_radius: float = 2.0
    source_noise: float = 0.05
    jitter_px: float = 1.0
    jitter_deg: float = 8.0
    easy_noise: float = 0.1
    easy_brightness: float = 0.1
    hard_rotation: tuple = (30.0, 60.0)
    # rotate hard samples in both directions, or counter-clockwise only
    rotation_both_ways: bool = True
    # "alternate": 0/90 degrees by class parity; "spread": 180*k/C; "same": all 0
    class_angles: str = "alternate"
    # "bar": one segment per class; "glyph": class-specific arrangement of segments
    pattern: str = "glyph"
    hard_occlusion: int = 4
    hard_noise: float = 0.3
    hard_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        self.hard_rotation = tuple(float(v) for v in self.hard_rotation)
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must lie in [0, 1]")
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise ValueError("need at least two classes and one sample per class")
        if self.pattern not in ("bar", "glyph"):
            raise ValueError(f"pattern must be 'bar' or 'glyph', got {self.pattern!r}")
        if self.class_angles not in ("alternate", "spread", "same"):
            raise ValueError(f"unknown class_angles {self.class_angles!r}")


@dataclass
class Dataset:
    """Images (n, 1, H, W) float32 with optional labels.

    ``sidecar`` holds evaluation-only arrays (target ground truth and hard
    tags); adaptation code must not read it.
    """

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    sidecar: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def without_sidecar(self) -> "Dataset":
        return Dataset(images=self.images, labels=self.labels)


def class_geometry(spec: DomainSpec, k: int):
    """Centre (row, col) and angle in degrees of class ``k``'s bar."""
    c = (spec.image_side - 1) / 2.0
    phi = 2 * np.pi * k / spec.num_classes
    centre = (c + spec.position_radius * np.sin(phi), c + spec.position_radius * np.cos(phi))
    if spec.class_angles == "same":
        return centre, 0.0
    if spec.class_angles == "spread":
        return centre, 180.0 * k / spec.num_classes
    return centre, 90.0 * (k % 2)


def render_bar(side: int, centre, angle_deg: float, length: float, halfwidth: float) -> np.ndarray:
    """Anti-aliased segment: intensity falls off linearly over one pixel outside the half-width."""
    rr, cc = np.mgrid[0:side, 0:side].astype(np.float64)
    t = np.deg2rad(angle_deg)
    d = np.array([np.sin(t), np.cos(t)])
    pr, pc = rr - centre[0], cc - centre[1]
    along = np.clip(pr * d[0] + pc * d[1], -length / 2, length / 2)
    dist = np.hypot(pr - along * d[0], pc - along * d[1])
    return np.clip(1.0 - (dist - halfwidth), 0.0, 1.0)


GLYPHS = ("single", "cross", "parallel", "corner")


def render_pattern(spec: DomainSpec, k: int, centre, angle_deg: float) -> np.ndarray:
    """Class ``k``'s pattern at the given pose."""
    L, hw, side = spec.bar_length, spec.bar_halfwidth, spec.image_side
    if spec.pattern == "bar":
        return render_bar(side, centre, angle_deg, L, hw)
    t = np.deg2rad(angle_deg)
    d = np.array([np.sin(t), np.cos(t)])
    n = np.array([d[1], -d[0]])
    c = np.asarray(centre, dtype=np.float64)
    kind = GLYPHS[k % len(GLYPHS)]
    if kind == "single":
        segs = [(c, angle_deg, L)]
    elif kind == "cross":
        segs = [(c, angle_deg, L), (c, angle_deg + 90.0, L)]
    elif kind == "parallel":
        off = 0.3 * L
        segs = [(c + off * n, angle_deg, L), (c - off * n, angle_deg, L)]
    else:
        h = 0.3 * L
        segs = [(c + h * d, angle_deg, 2 * h), (c + h * n, angle_deg + 90.0, 2 * h)]
    return np.max([render_bar(side, p, a, l, hw) for p, a, l in segs], axis=0)


def template(spec: DomainSpec, k: int) -> np.ndarray:
    centre, angle = class_geometry(spec, k)
    return render_pattern(spec, k, centre, angle)


def _sample(spec: DomainSpec, k: int, rng: np.random.Generator, kind: str) -> np.ndarray:
    (r0, c0), angle = class_geometry(spec, k)
    r0 += rng.uniform(-spec.jitter_px, spec.jitter_px)
    c0 += rng.uniform(-spec.jitter_px, spec.jitter_px)
    angle += rng.uniform(-spec.jitter_deg, spec.jitter_deg)
    if kind == "hard":
        lo, hi = spec.hard_rotation
        sign = rng.choice([-1.0, 1.0]) if spec.rotation_both_ways else 1.0
        angle += sign * rng.uniform(lo, hi)
    img = rng.uniform(0.8, 1.0) * render_pattern(spec, k, (r0, c0), angle)
    if kind == "source":
        img += rng.normal(0.0, spec.source_noise, img.shape)
    elif kind == "easy":
        img += rng.uniform(-spec.easy_brightness, spec.easy_brightness)
        img += rng.normal(0.0, spec.easy_noise, img.shape)
    else:
        s = spec.hard_occlusion
        r, c = rng.integers(0, spec.image_side - s + 1, size=2)
        img[r:r + s, c:c + s] = 0.0
        img += rng.normal(0.0, spec.hard_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: DomainSpec):
    """Return ``(source, target)`` datasets; deterministic in ``spec.seed``.

    Samples come out class-major and are then shuffled with the same
    generator. The target's true labels and hard tags live in its sidecar.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.samples_per_class
    n_hard = int(round(spec.hard_fraction * n))
    if 0.0 < spec.hard_fraction < 1.0:
        n_hard = min(max(n_hard, 1), n - 1)
    src, src_y, tgt, tgt_y, tgt_hard = [], [], [], [], []
    for k in range(spec.num_classes):
        for _ in range(n):
            src.append(_sample(spec, k, rng, "source"))
            src_y.append(k)
        for i in range(n):
            hard = i < n_hard
            tgt.append(_sample(spec, k, rng, "hard" if hard else "easy"))
            tgt_y.append(k)
            tgt_hard.append(hard)
    ps = rng.permutation(len(src))
    pt = rng.permutation(len(tgt))
    side = spec.image_side
    source = Dataset(images=np.asarray(src, dtype=np.float32)[ps].reshape(-1, 1, side, side),
                     labels=np.asarray(src_y, dtype=np.int32)[ps])
    target = Dataset(images=np.asarray(tgt, dtype=np.float32)[pt].reshape(-1, 1, side, side),
                     sidecar={"labels": np.asarray(tgt_y, dtype=np.int32)[pt],
                              "hard": np.asarray(tgt_hard, dtype=np.int32)[pt]})
    return source, target
