"""Deterministic synthetic small-target sequences.

A filled rectangle moves over a static clutter background under a constant
velocity model with Gaussian acceleration, optionally drifting in scale and
aspect ratio and passing behind occluders. Everything is derived from one seed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from comet.evalbench.sequences import SequenceRecord

PRESETS = ("easy", "occlusion", "viewpoint-scale-drift")


@dataclass
class SynthConfig:
    frame_size: tuple[int, int] = (256, 256)  # width, height
    target_size: tuple[float, float] = (8.0, 32.0)
    length: int = 100
    velocity_sigma: float = 1.5  # px/frame, initial speed spread
    accel_sigma: float = 0.15  # px/frame^2
    scale_drift: float = 0.0  # std of the per-frame log-scale random walk
    aspect_drift: float = 0.0  # std of the per-frame log-aspect random walk
    occlusions: list[tuple[int, int]] = field(default_factory=list)  # inclusive frame spans
    occluder_fraction: float = 0.6
    n_clutter: int = 14
    noise_sigma: float = 3.0  # pixel noise, 0..255 scale

    def __post_init__(self):
        self.frame_size = tuple(self.frame_size)
        self.target_size = tuple(self.target_size)
        self.occlusions = [tuple(o) for o in self.occlusions]
        lo, hi = self.target_size
        if not 0 < lo <= hi:
            raise ValueError(f"invalid target size range {self.target_size}")
        if hi >= min(self.frame_size):
            raise ValueError(f"target size {hi} exceeds frame {self.frame_size}")
        if not 0.5 <= self.occluder_fraction <= 1:
            raise ValueError("occluder_fraction must lie in [0.5, 1]")

    @classmethod
    def preset(cls, name: str, rng: np.random.Generator | None = None, **kw) -> SynthConfig:
        if name == "easy":
            return cls(**kw)
        if name == "occlusion":
            rng = rng or np.random.default_rng(0)
            length = kw.get("length", cls.length)
            start = int(rng.integers(length // 5, max(length // 5 + 1, length - 20)))
            span = (start, min(start + int(rng.integers(5, 15)), length - 1))
            return cls(**{"occlusions": [span], **kw})
        if name == "viewpoint-scale-drift":
            return cls(**{"scale_drift": 0.02, "aspect_drift": 0.02, **kw})
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frame_size"] = list(self.frame_size)
        d["target_size"] = list(self.target_size)
        d["occlusions"] = [list(o) for o in self.occlusions]
        return d


def _pixel_span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Pixels whose centres fall in ``[lo, hi)``, at least one, clipped to the frame."""
    a = int(np.ceil(lo - 0.5))
    b = max(int(np.ceil(hi - 0.5)), a + 1)
    return max(a, 0), min(b, limit)


def _paint(img, box, color):
    x, y, w, h = box
    H, W = img.shape[:2]
    x0, x1 = _pixel_span(x, x + w, W)
    y0, y1 = _pixel_span(y, y + h, H)
    if x1 > x0 and y1 > y0:
        img[y0:y1, x0:x1] = color


class SyntheticFrames(Sequence):
    """Frames rendered on demand from the static scene description."""

    def __init__(self, background, boxes, target_color, occluders, occluder_color, noise_sigma, seed):
        self.background = background
        self.boxes = boxes
        self.target_color = target_color
        self.occluders = occluders  # frame index -> occluder box
        self.occluder_color = occluder_color
        self.noise_sigma = noise_sigma
        self.seed = seed

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        img = self.background.copy()
        _paint(img, self.boxes[i], self.target_color)
        if i in self.occluders:
            _paint(img, self.occluders[i], self.occluder_color)
        if self.noise_sigma > 0:
            noise = np.random.default_rng([self.seed, i]).normal(0, self.noise_sigma, img.shape)
            img = np.clip(img.astype(np.float64) + noise, 0, 255).round().astype(np.uint8)
        return img


def _random_color(rng) -> np.ndarray:
    return rng.integers(0, 256, size=3).astype(np.uint8)


def synth_sequence(cfg: SynthConfig, seed: int, name: str | None = None) -> SequenceRecord:
    rng = np.random.default_rng(seed)
    W, H = cfg.frame_size
    base = _random_color(rng) // 2 + 64
    background = np.empty((H, W, 3), dtype=np.uint8)
    background[:] = base
    for _ in range(cfg.n_clutter):
        cw, ch = rng.uniform(4, 40, size=2)
        _paint(background, (rng.uniform(-10, W), rng.uniform(-10, H), cw, ch), _random_color(rng))

    lo, hi = cfg.target_size
    w, h = rng.uniform(lo, hi, size=2)
    log_s, log_a = 0.0, 0.0
    cx = rng.uniform(hi, W - hi)
    cy = rng.uniform(hi, H - hi)
    v = rng.normal(0, cfg.velocity_sigma, size=2)
    target_color = _random_color(rng)
    occluder_color = _random_color(rng)
    occ_side = rng.integers(0, 4)  # which side the occluder enters from

    boxes = np.zeros((cfg.length, 4))
    for t in range(cfg.length):
        if t > 0:
            v = v + rng.normal(0, cfg.accel_sigma, size=2)
            cx, cy = cx + v[0], cy + v[1]
            log_s += rng.normal(0, cfg.scale_drift) if cfg.scale_drift else 0.0
            log_a += rng.normal(0, cfg.aspect_drift) if cfg.aspect_drift else 0.0
        tw = float(np.clip(w * np.exp(log_s + log_a / 2), lo / 2, hi * 1.5))
        th = float(np.clip(h * np.exp(log_s - log_a / 2), lo / 2, hi * 1.5))
        # bounce off the frame edges
        if cx - tw / 2 < 0 or cx + tw / 2 > W:
            v[0] = -v[0]
            cx = float(np.clip(cx, tw / 2, W - tw / 2))
        if cy - th / 2 < 0 or cy + th / 2 > H:
            v[1] = -v[1]
            cy = float(np.clip(cy, th / 2, H - th / 2))
        boxes[t] = np.round([cx - tw / 2, cy - th / 2, tw, th], 4)

    occluders = {}
    f = cfg.occluder_fraction
    for start, end in cfg.occlusions:
        for t in range(max(start, 0), min(end, cfg.length - 1) + 1):
            x, y, bw, bh = boxes[t]
            m = 2.0  # margin so pixel rounding never uncovers the covered part
            if occ_side == 0:
                occluders[t] = (x - m, y - m, bw * f + m, bh + 2 * m)
            elif occ_side == 1:
                occluders[t] = (x + bw * (1 - f), y - m, bw * f + m, bh + 2 * m)
            elif occ_side == 2:
                occluders[t] = (x - m, y - m, bw + 2 * m, bh * f + m)
            else:
                occluders[t] = (x - m, y + bh * (1 - f), bw + 2 * m, bh * f + m)

    attributes = {"SO"}
    if cfg.occlusions:
        attributes.add("LO")
    if cfg.scale_drift:
        attributes.add("SV")
    if cfg.aspect_drift:
        attributes.add("VC")
    if cfg.n_clutter >= 10:
        attributes.add("BC")
    frames = SyntheticFrames(background, boxes, target_color, occluders, occluder_color, cfg.noise_sigma, seed)
    return SequenceRecord(name or f"synth_{seed:06d}", frames, boxes, frozenset(attributes))
