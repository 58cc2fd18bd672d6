"""Online tracking: rough estimate, proposal jitter, gradient box refinement, K-best averaging.

Refinement alternates two updates per iteration, both from one forward pass:

* IoU ascent, every gradient component scaled by the box size:
  ``B += beta * [dI/dx * w, dI/dy * h, dI/dw * w, dI/dh * h]``
* CLE descent on ``r = (cx^2 + cy^2) / 2`` of the predicted offsets, only the
  position components scaled: ``B -= beta * [dr/dx * w, dr/dy * h, dr/dw, dr/dh]``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import cv2
import numpy as np
import torch

from comet import boxgeom as bg
from comet.boxgeom import BoxXYWH
from comet.cometnet import CometNet
from comet.imaging import extract_patch, to_gray
from comet.training import denormalize_iou

log = logging.getLogger(__name__)


class RefinementError(FloatingPointError):
    pass


class EstimatorError(RuntimeError):
    pass


@dataclass
class RefineConfig:
    beta: float = 1.0
    n_steps: int = 5
    k_best: int = 3
    n_proposals: int = 10
    jitter_factors: tuple[float, ...] = (0.1, 0.2)
    area_factor: float = 5.0
    min_size: float = bg.MIN_BOX_SIZE

    def __post_init__(self):
        self.jitter_factors = tuple(self.jitter_factors)
        if not 1 <= self.k_best <= self.n_proposals + 1:
            raise ValueError(f"k_best must lie in [1, n_proposals + 1], got {self.k_best}")


def iou_step(boxes: torch.Tensor, grad: torch.Tensor, beta: float) -> torch.Tensor:
    wh = boxes[..., 2:]
    return boxes + beta * grad * torch.cat([wh, wh], dim=-1)


def cle_step(boxes: torch.Tensor, grad: torch.Tensor, beta: float) -> torch.Tensor:
    scale = torch.cat([boxes[..., 2:], torch.ones_like(boxes[..., 2:])], dim=-1)
    return boxes - beta * grad * scale


def clamp_boxes(boxes: torch.Tensor, min_size: float) -> torch.Tensor:
    return torch.cat([boxes[..., :2], boxes[..., 2:].clamp(min=min_size)], dim=-1)


def box_gradients(net: CometNet, test_feat, modulation, boxes: torch.Tensor):
    """Predicted IoU (normalised scale), CLE offsets, and their box gradients for ``boxes`` (N, 4)."""
    b = boxes.detach().clone().requires_grad_(True)
    pred = net.grouped_heads(test_feat, modulation, b[None])
    iou = pred.iou[0, 0]
    g_iou = torch.autograd.grad(iou.sum(), b, retain_graph=pred.cle is not None)[0]
    if pred.cle is None:
        return iou.detach(), None, g_iou, None
    cle = pred.cle[0, 0]
    g_cle = torch.autograd.grad(0.5 * (cle ** 2).sum(), b)[0]
    return iou.detach(), cle.detach(), g_iou, g_cle


def refine_boxes(net: CometNet, test_feat, modulation, boxes, cfg: RefineConfig):
    """Run ``cfg.n_steps`` refinement iterations on crop-space boxes.

    Returns ``(boxes, scores)`` with scores the final predicted IoU in [0, 1].
    """
    boxes = torch.as_tensor(np.asarray(boxes), dtype=test_feat.dtype).reshape(-1, 4)
    for _ in range(cfg.n_steps):
        _, _, g_iou, g_cle = box_gradients(net, test_feat, modulation, boxes)
        if not torch.isfinite(g_iou).all() or (g_cle is not None and not torch.isfinite(g_cle).all()):
            raise RefinementError("non-finite box gradient during refinement")
        boxes = clamp_boxes(iou_step(boxes, g_iou, cfg.beta), cfg.min_size)
        if g_cle is not None:
            boxes = clamp_boxes(cle_step(boxes, g_cle, cfg.beta), cfg.min_size)
    with torch.no_grad():
        iou = net.grouped_heads(test_feat, modulation, boxes[None]).iou[0, 0]
    return boxes.detach(), denormalize_iou(iou).clamp(0.0, 1.0)


def select_k_best(boxes: torch.Tensor, scores: torch.Tensor, k: int) -> torch.Tensor:
    """Unweighted mean of the ``k`` highest-scoring boxes (ties broken by index)."""
    order = np.argsort(-scores.detach().cpu().numpy(), kind="stable")[:k]
    return boxes[torch.as_tensor(order)].mean(dim=0)


class RoughEstimator(Protocol):
    def initialize(self, frame0: np.ndarray, box: BoxXYWH) -> None: ...

    def estimate(self, frame: np.ndarray, prev_box: BoxXYWH, frame_index: int) -> BoxXYWH: ...


class GtJitterEstimator:
    """Ground truth perturbed by Gaussian noise of ``sigma_factor`` times the box size."""

    def __init__(self, gt_boxes, sigma_factor: float = 0.1, seed: int = 0):
        self.gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.sigma_factor = sigma_factor
        self.seed = seed

    def initialize(self, frame0, box):
        pass

    def estimate(self, frame, prev_box, frame_index):
        if not 0 <= frame_index < len(self.gt_boxes):
            raise EstimatorError(f"no ground truth for frame {frame_index}")
        gt = BoxXYWH.from_array(self.gt_boxes[frame_index])
        sigma = self.sigma_factor * np.array([gt.w, gt.h, gt.w, gt.h])
        return bg.gaussian_jitter(gt, sigma, np.random.default_rng([self.seed, frame_index]))


class NCCEstimator:
    """Normalised cross-correlation of the first-frame grey template over a local search window.

    ``context`` grows the template by that multiple of the box size on every side. Flat-coloured
    targets then carry their edges into the match, but static background enters the template too.
    """

    def __init__(self, scales=(0.96, 1.0, 1.04), search_margin: float = 1.0, context: float = 0.0):
        self.scales = tuple(scales)
        self.search_margin = search_margin
        self.context = context
        self.template = None

    def _padded(self, w, h):
        return w * (1 + 2 * self.context), h * (1 + 2 * self.context)

    def initialize(self, frame0, box):
        box = bg.clamp_to_frame(box, frame0.shape[1], frame0.shape[0])
        gray = to_gray(frame0).astype(np.float32)
        pw, ph = self._padded(box.w, box.h)
        cx, cy = box.center()
        # reflect-pad so context near the border keeps the template centred on the target
        pad = int(np.ceil(max(pw, ph))) + 1
        gray = cv2.copyMakeBorder(gray, pad, pad, pad, pad, cv2.BORDER_REFLECT)
        x0, y0 = int(round(cx - pw / 2)) + pad, int(round(cy - ph / 2)) + pad
        self.template = gray[y0:y0 + max(int(round(ph)), 1), x0:x0 + max(int(round(pw)), 1)]

    def estimate(self, frame, prev_box, frame_index=None):
        if self.template is None:
            raise EstimatorError("NCC estimator used before initialize()")
        H, W = frame.shape[:2]
        prev_box = bg.as_box(prev_box)
        if prev_box.x + prev_box.w <= 0 or prev_box.y + prev_box.h <= 0 or prev_box.x >= W or prev_box.y >= H:
            raise EstimatorError(f"previous box {tuple(prev_box)} lies outside the frame")
        gray = to_gray(frame).astype(np.float32)
        cx, cy = prev_box.center()
        best = None
        # ties go to the scale nearest 1 (small templates often round to the same size)
        for s in sorted(self.scales, key=lambda v: abs(np.log(v))):
            pw, ph = self._padded(prev_box.w * s, prev_box.h * s)
            tw, th = max(int(round(pw)), 2), max(int(round(ph)), 2)
            tmpl = cv2.resize(self.template, (tw, th), interpolation=cv2.INTER_LINEAR)
            mx = max(int(round(prev_box.w * s)), 2) * self.search_margin + 2
            my = max(int(round(prev_box.h * s)), 2) * self.search_margin + 2
            x0 = int(max(np.floor(cx - tw / 2 - mx), 0))
            y0 = int(max(np.floor(cy - th / 2 - my), 0))
            x1 = int(min(np.ceil(cx + tw / 2 + mx), W))
            y1 = int(min(np.ceil(cy + th / 2 + my), H))
            window = gray[y0:y1, x0:x1]
            if window.shape[0] < th or window.shape[1] < tw:
                continue
            resp = cv2.matchTemplate(window, tmpl, cv2.TM_CCOEFF_NORMED)
            resp = np.nan_to_num(resp, nan=-1.0)
            iy, ix = np.unravel_index(int(np.argmax(resp)), resp.shape)
            score = float(resp[iy, ix])
            if best is None or score > best[0] + 1e-9:
                pcx, pcy = x0 + ix + tw / 2, y0 + iy + th / 2
                nw, nh = prev_box.w * s, prev_box.h * s
                best = (score, s, BoxXYWH(pcx - nw / 2, pcy - nh / 2, nw, nh))
        if best is None:
            raise EstimatorError("search window smaller than the template at every scale")
        self.last_scale = best[1]
        return bg.clamp_to_frame(best[2], W, H)


def builtin_estimators() -> dict[str, type]:
    return {"gt_jitter": GtJitterEstimator, "ncc": NCCEstimator}


@dataclass
class TrackState:
    net: CometNet
    modulation: torch.Tensor  # (1, 1, C)
    prev_box: BoxXYWH
    estimator: RoughEstimator
    cfg: RefineConfig
    rng: np.random.Generator
    frame_index: int = 0
    flagged: list[tuple[int, str]] = field(default_factory=list)


def _patch(net: CometNet, frame, crop: bg.CropSpec):
    dtype = next(net.parameters()).dtype
    return extract_patch(frame, crop, dtype=dtype)[None]


def init(frame0: np.ndarray, gt_box, net: CometNet, estimator: RoughEstimator,
         cfg: RefineConfig | None = None, seed: int = 0) -> TrackState:
    """Encode the first-frame target into a single modulation vector."""
    cfg = cfg or RefineConfig()
    H, W = frame0.shape[:2]
    box = bg.clamp_to_frame(bg.validate(gt_box), W, H)
    net.eval()
    crop = bg.crop_spec(box, cfg.area_factor, net.cfg.input_size)
    with torch.no_grad():
        feat = net.features(_patch(net, frame0, crop))
        ref_box = torch.as_tensor(crop.to_crop(box).as_array(), dtype=feat.dtype).view(1, 1, 4)
        modulation = net.reference_modulation(feat, ref_box)
    estimator.initialize(frame0, box)
    return TrackState(net, modulation, box, estimator, cfg, np.random.default_rng(seed))


def jitter_proposals(box: BoxXYWH, cfg: RefineConfig, rng) -> list[BoxXYWH]:
    out = []
    for _ in range(cfg.n_proposals):
        f = cfg.jitter_factors[int(rng.integers(len(cfg.jitter_factors)))]
        out.append(bg.gaussian_jitter(box, f * np.array([box.w, box.h, box.w, box.h]), rng, cfg.min_size))
    return out


def track_frame(state: TrackState, frame: np.ndarray) -> BoxXYWH:
    state.frame_index += 1
    H, W = frame.shape[:2]
    try:
        estimate = state.estimator.estimate(frame, state.prev_box, state.frame_index)
    except EstimatorError as exc:
        state.flagged.append((state.frame_index, f"estimator: {exc}"))
        return state.prev_box
    estimate = bg.clamp_to_frame(estimate, W, H)
    boxes = np.array([b.as_array() for b in [estimate, *jitter_proposals(estimate, state.cfg, state.rng)]])
    net = state.net
    crop = bg.crop_spec(estimate, state.cfg.area_factor, net.cfg.input_size)
    with torch.no_grad():
        feat = net.features(_patch(net, frame, crop))
    try:
        refined, scores = refine_boxes(net, feat, state.modulation, crop.to_crop_array(boxes), state.cfg)
        pred = crop.from_crop(select_k_best(refined, scores, state.cfg.k_best).numpy())
    except RefinementError as exc:
        state.flagged.append((state.frame_index, f"refinement: {exc}"))
        pred = estimate
    pred = bg.clamp_to_frame(pred, W, H, state.cfg.min_size)
    state.prev_box = pred
    return pred


def track_sequence(record, net: CometNet, estimator: RoughEstimator, cfg: RefineConfig | None = None,
                   seed: int = 0) -> tuple[np.ndarray, list[tuple[int, str]]]:
    """One-pass run; row 0 is the given first-frame box."""
    state = init(record.frames[0], record.gt_boxes[0], net, estimator, cfg, seed)
    out = [np.asarray(record.gt_boxes[0], dtype=np.float64)]
    for i in range(1, len(record)):
        out.append(track_frame(state, record.frames[i]).as_array())
    return np.array(out), state.flagged


def refinement_gain(net: CometNet, dataset, n_frames: int = 200, cfg: RefineConfig | None = None,
                    iou_range: tuple[float, float] = (0.1, 0.5), seed: int = 0) -> tuple[float, float]:
    """Mean true IoU of jittered proposals before and after refinement on held-out frames.

    One proposal per frame, drawn with its true IoU inside ``iou_range``; the modulation comes
    from the ground truth of a second frame of the same sequence.
    """
    from comet.training import SamplePairConfig, build_sample_pair

    cfg = cfg or RefineConfig()
    rng = np.random.default_rng(seed)
    sample_cfg = SamplePairConfig(out_size=net.cfg.input_size, use_reference_proposals=False, augment=False)
    net.eval()
    dtype = next(net.parameters()).dtype
    before, after = [], []
    while len(before) < n_frames:
        pair = build_sample_pair(dataset[int(rng.integers(len(dataset)))], rng, sample_cfg)
        ious = (pair.iou_targets + 1.0) / 2.0
        ok = np.flatnonzero((ious >= iou_range[0]) & (ious <= iou_range[1]))
        if not len(ok):
            continue
        box = pair.test_boxes[ok[0]]
        with torch.no_grad():
            feats = net.features(torch.stack([pair.ref_patch, pair.test_patch]).to(dtype))
            ref_box = torch.as_tensor(pair.ref_boxes[:1], dtype=dtype).view(1, 1, 4)
            mod = net.reference_modulation(feats[:1], ref_box)
        refined, _ = refine_boxes(net, feats[1:], mod, box[None], cfg)
        before.append(bg.iou(pair.test_gt, box))
        after.append(bg.iou(pair.test_gt, refined[0].numpy()))
    return float(np.mean(before)), float(np.mean(after))
