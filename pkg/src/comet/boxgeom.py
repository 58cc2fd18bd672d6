"""Axis-aligned box geometry, Gaussian jittering and offline proposal generation.

Boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner. Most helpers
accept either a :class:`BoxXYWH` or anything array-like with four entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MIN_BOX_SIZE = 1.0

#: box-relative standard deviation factors for the default jitter pool
DEFAULT_SIGMA_FACTORS = (0.05, 0.1, 0.2, 0.3, 0.5)


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoxXYWH:
    x: float
    y: float
    w: float
    h: float

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> BoxXYWH:
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def __iter__(self):
        return iter((self.x, self.y, self.w, self.h))


BoxLike = BoxXYWH | Sequence[float] | np.ndarray


def as_box(b: BoxLike) -> BoxXYWH:
    return b if isinstance(b, BoxXYWH) else BoxXYWH.from_array(b)


def validate(b: BoxLike) -> BoxXYWH:
    b = as_box(b)
    if not (b.w > 0 and b.h > 0) or not all(math.isfinite(v) for v in b):
        raise InvalidBoxError(f"box must have finite coordinates and positive size, got {tuple(b)}")
    return b


def clamp_size(b: BoxLike, min_size: float = MIN_BOX_SIZE) -> BoxXYWH:
    b = as_box(b)
    return BoxXYWH(b.x, b.y, max(b.w, min_size), max(b.h, min_size))


def clamp_to_frame(b: BoxLike, frame_w: float, frame_h: float,
                   min_size: float = MIN_BOX_SIZE) -> BoxXYWH:
    """Clip a box to ``[0, frame_w] x [0, frame_h]`` keeping at least ``min_size`` per side."""
    b = as_box(b)
    x1 = min(max(b.x, 0.0), frame_w - min_size)
    y1 = min(max(b.y, 0.0), frame_h - min_size)
    x2 = min(max(b.x + b.w, x1 + min_size), frame_w)
    y2 = min(max(b.y + b.h, y1 + min_size), frame_h)
    return BoxXYWH(x1, y1, x2 - x1, y2 - y1)


def iou(a: BoxLike, b: BoxLike) -> float:
    a, b = validate(a), validate(b)
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / (a.w * a.h + b.w * b.h - inter), 1.0)


def iou_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``(..., 4)`` arrays (broadcasting). No validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.minimum(inter / union, 1.0)


def cle_normalized(gt: BoxLike, p: BoxLike) -> tuple[float, float]:
    """Center offset from ``p`` to ``gt`` in units of the ground-truth size."""
    gt = validate(gt)
    p = as_box(p)
    gcx, gcy = gt.center()
    pcx, pcy = p.center()
    return ((gcx - pcx) / gt.w, (gcy - pcy) / gt.h)


def cle_many(gt: np.ndarray, p: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    dx = (gt[..., 0] + gt[..., 2] / 2 - p[..., 0] - p[..., 2] / 2) / gt[..., 2]
    dy = (gt[..., 1] + gt[..., 3] / 2 - p[..., 1] - p[..., 3] / 2) / gt[..., 3]
    return np.stack([dx, dy], axis=-1)


def center_error(a: BoxLike, b: BoxLike) -> float:
    """Euclidean distance between box centers in pixels."""
    (ax, ay), (bx, by) = as_box(a).center(), as_box(b).center()
    return math.hypot(ax - bx, ay - by)


def gaussian_jitter(b: BoxLike, sigma, rng: np.random.Generator,
                    min_size: float = MIN_BOX_SIZE) -> BoxXYWH:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma components must be non-negative")
    if not np.any(sigma):
        return as_box(b)
    out = as_box(b).as_array() + rng.normal(0.0, 1.0, size=4) * sigma
    return clamp_size(out, min_size)


def default_sigma_pool(b: BoxLike, factors=DEFAULT_SIGMA_FACTORS) -> list[np.ndarray]:
    b = as_box(b)
    scale = np.array([b.w, b.h, b.w, b.h])
    return [f * scale for f in factors]


@dataclass
class JitterConfig:
    threshold: float
    max_iter: int
    count: int
    sigma_factors: tuple[float, ...] = DEFAULT_SIGMA_FACTORS
    #: absolute sigma vectors; overrides ``sigma_factors`` when given
    sigma_pool: list | None = None
    mean: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.max_iter < 1 or self.count < 0:
            raise ValueError("max_iter must be positive and count non-negative")

    def pool_for(self, b: BoxLike) -> list[np.ndarray]:
        if self.sigma_pool is not None:
            return [np.asarray(s, dtype=np.float64) for s in self.sigma_pool]
        return default_sigma_pool(b, self.sigma_factors)

    @classmethod
    def reference(cls, count: int = 7, **kw) -> JitterConfig:
        return cls(threshold=kw.pop("threshold", 0.8), max_iter=kw.pop("max_iter", 200), count=count, **kw)

    @classmethod
    def test(cls, count: int = 16, **kw) -> JitterConfig:
        return cls(threshold=kw.pop("threshold", 0.1), max_iter=kw.pop("max_iter", 20), count=count, **kw)


@dataclass
class ProposalSet:
    boxes: list[BoxXYWH]
    exhausted_flags: list[bool]
    source_box: BoxXYWH
    threshold: float = 0.0
    attempts: list[int] = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.array([b.as_array() for b in self.boxes]).reshape(-1, 4)

    @property
    def exhaustion_rate(self) -> float:
        return float(np.mean(self.exhausted_flags)) if self.exhausted_flags else 0.0


def generate_proposals(b: BoxLike, cfg: JitterConfig, rng: np.random.Generator) -> ProposalSet:
    """Jitter ``b`` until each proposal clears ``cfg.threshold`` or ``cfg.max_iter`` draws are spent.

    The sigma vector is re-drawn uniformly from the pool on every attempt. A slot
    that never clears the threshold keeps its last draw and is flagged.
    """
    b = validate(b)
    pool = cfg.pool_for(b)
    mean = np.asarray(cfg.mean, dtype=np.float64)
    base = b.as_array() + mean
    boxes, flags, attempts = [], [], []
    for _ in range(cfg.count):
        ii = 0
        while True:
            sigma = pool[rng.integers(len(pool))]
            cand = clamp_size(base + rng.normal(0.0, 1.0, size=4) * sigma)
            ii += 1
            ok = iou(b, cand) >= cfg.threshold
            if ok or ii >= cfg.max_iter:
                break
        boxes.append(cand)
        flags.append(not ok)
        attempts.append(ii)
    return ProposalSet(boxes, flags, b, cfg.threshold, attempts)


@dataclass(frozen=True)
class CropSpec:
    """Square source window mapped onto an ``out_size`` x ``out_size`` patch."""

    x0: float
    y0: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.out_size / self.side

    def to_crop(self, b: BoxLike) -> BoxXYWH:
        b = as_box(b)
        s = self.scale
        return BoxXYWH((b.x - self.x0) * s, (b.y - self.y0) * s, b.w * s, b.h * s)

    def from_crop(self, b: BoxLike) -> BoxXYWH:
        b = as_box(b)
        s = self.side / self.out_size
        return BoxXYWH(b.x * s + self.x0, b.y * s + self.y0, b.w * s, b.h * s)

    def to_crop_array(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64)
        out = boxes.copy()
        out[..., 0] -= self.x0
        out[..., 1] -= self.y0
        return out * self.scale

    def from_crop_array(self, boxes: np.ndarray) -> np.ndarray:
        out = np.asarray(boxes, dtype=np.float64) / self.scale
        out[..., 0] += self.x0
        out[..., 1] += self.y0
        return out


def crop_spec(b: BoxLike, area_factor: float = 5.0, out_size: int = 288,
              center: tuple[float, float] | None = None) -> CropSpec:
    """Window of side ``area_factor * sqrt(w*h)`` centred on ``b`` (or on ``center``)."""
    b = validate(b)
    if area_factor <= 0 or out_size <= 0:
        raise ValueError("area_factor and out_size must be positive")
    side = area_factor * math.sqrt(b.w * b.h)
    cx, cy = center if center is not None else b.center()
    return CropSpec(cx - side / 2, cy - side / 2, side, int(out_size))
