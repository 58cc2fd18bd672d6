"""Offline training: sample pairs, multitask loss and the optimisation loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from comet import boxgeom as bg
from comet.cometnet import CometNet, GroupedPrediction, NetConfig, save_net
from comet.diffcore.optim import AdamState, adam_step, step_lr
from comet.evalbench.sequences import SequenceRecord
from comet.imaging import extract_patch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class SamplePairConfig:
    max_gap: int = 50
    area_factor: float = 5.0
    out_size: int = 288
    n_test: int = 16
    n_ref: int = 8
    use_reference_proposals: bool = True
    ref_threshold: float = 0.8
    ref_max_iter: int = 200
    test_threshold: float = 0.1
    test_max_iter: int = 20
    center_jitter: float = 0.5  # std of test-crop centre offset, in units of sqrt(w*h)
    scale_jitter: float = 0.15  # std of the test-crop log-scale
    augment: bool = True

    def __post_init__(self):
        if self.n_ref != self.n_test // 2:
            raise ValueError(f"n_ref must equal n_test / 2, got {self.n_ref} and {self.n_test}")
        if self.ref_threshold <= self.test_threshold:
            raise ValueError("reference threshold must exceed the test threshold")

    @property
    def ref_jitter(self) -> bg.JitterConfig:
        return bg.JitterConfig(self.ref_threshold, self.ref_max_iter, self.n_ref - 1)

    @property
    def test_jitter(self) -> bg.JitterConfig:
        return bg.JitterConfig(self.test_threshold, self.test_max_iter, self.n_test)


@dataclass
class LossConfig:
    lam: float = 4.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    lr_decay: float = 0.2
    decay_every: int = 15
    epochs: int = 60
    steps_per_epoch: int = 1000
    batch_size: int = 64
    seed: int = 0
    freeze_backbone: bool = False
    overfit: bool = False

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        return cls(**{**dict(lr=1e-3, epochs=20, steps_per_epoch=100, batch_size=8), **kw})

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class SamplePair:
    ref_patch: torch.Tensor  # (3, S, S)
    test_patch: torch.Tensor
    ref_boxes: np.ndarray  # (n_ref, 4), ground truth first, patch pixels
    test_boxes: np.ndarray  # (n_test, 4)
    iou_targets: np.ndarray  # (n_test,) in [-1, 1]
    cle_targets: np.ndarray  # (n_test, 2) in [-1, 1]
    test_gt: np.ndarray
    ref_exhausted: list[bool] = field(default_factory=list)
    test_exhausted: list[bool] = field(default_factory=list)


def normalize_iou(iou):
    return 2.0 * iou - 1.0


def denormalize_iou(t):
    return (t + 1.0) / 2.0


def iou_cle_targets(gt, boxes) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64).reshape(1, 4)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return normalize_iou(bg.iou_many(gt, boxes)), np.clip(bg.cle_many(gt, boxes), -1.0, 1.0)


def augment_reference(patch: torch.Tensor, boxes: np.ndarray, rng: np.random.Generator,
                      flip: bool | None = None, brightness=None):
    """Random horizontal flip (p = 0.5) and per-channel brightness in [0.9, 1.1]."""
    S = patch.shape[-1]
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if brightness is None:
        brightness = rng.uniform(0.9, 1.1, size=3)
    if flip:
        patch = patch.flip(-1)
        boxes[:, 0] = S - boxes[:, 0] - boxes[:, 2]
    scale = torch.as_tensor(np.asarray(brightness, dtype=np.float64), dtype=patch.dtype).view(-1, 1, 1)
    patch = (patch * scale).clamp(0.0, 1.0)
    return patch, boxes


def _pick_frames(n: int, max_gap: int, rng) -> tuple[int, int]:
    if n < 2:
        raise TrainingError(f"sequence needs at least 2 annotated frames, has {n}")
    t = int(rng.integers(n))
    lo, hi = max(0, t - max_gap), min(n - 1, t + max_gap)
    return t, int(rng.integers(lo, hi + 1))


def build_sample_pair(seq: SequenceRecord, rng: np.random.Generator, cfg: SamplePairConfig,
                      frames: tuple[int, int] | None = None) -> SamplePair:
    t_ref, t_test = frames if frames is not None else _pick_frames(len(seq), cfg.max_gap, rng)
    ref_gt = bg.validate(seq.gt_boxes[t_ref])
    test_gt = bg.validate(seq.gt_boxes[t_test])

    ref_crop = bg.crop_spec(ref_gt, cfg.area_factor, cfg.out_size)
    ref_patch = extract_patch(seq.frames[t_ref], ref_crop)
    ref_gt_c = ref_crop.to_crop(ref_gt)
    ref_boxes = [ref_gt_c.as_array()]
    ref_flags = [False]
    if cfg.use_reference_proposals and cfg.n_ref > 1:
        props = bg.generate_proposals(ref_gt_c, cfg.ref_jitter, rng)
        ref_boxes += [b.as_array() for b in props.boxes]
        ref_flags += props.exhausted_flags
    ref_boxes = np.array(ref_boxes)
    if cfg.augment:
        ref_patch, ref_boxes = augment_reference(ref_patch, ref_boxes, rng)

    size = math.sqrt(test_gt.w * test_gt.h)
    cx, cy = test_gt.center()
    cx += rng.normal(0, cfg.center_jitter) * size if cfg.center_jitter else 0.0
    cy += rng.normal(0, cfg.center_jitter) * size if cfg.center_jitter else 0.0
    factor = cfg.area_factor * (math.exp(rng.normal(0, cfg.scale_jitter)) if cfg.scale_jitter else 1.0)
    test_crop = bg.crop_spec(test_gt, factor, cfg.out_size, center=(cx, cy))
    test_patch = extract_patch(seq.frames[t_test], test_crop)
    test_gt_c = test_crop.to_crop(test_gt)
    props = bg.generate_proposals(test_gt_c, cfg.test_jitter, rng)
    test_boxes = props.as_array()
    iou_t, cle_t = iou_cle_targets(test_gt_c.as_array(), test_boxes)
    return SamplePair(ref_patch, test_patch, ref_boxes, test_boxes, iou_t, cle_t, test_gt_c.as_array(),
                      ref_flags, props.exhausted_flags)


@dataclass
class Batch:
    ref_images: torch.Tensor
    test_images: torch.Tensor
    ref_boxes: torch.Tensor
    test_boxes: torch.Tensor
    iou_targets: torch.Tensor
    cle_targets: torch.Tensor


def collate(pairs: Sequence[SamplePair], dtype=torch.float32) -> Batch:
    def stack(xs):
        return torch.as_tensor(np.stack(xs), dtype=dtype)

    return Batch(
        torch.stack([p.ref_patch for p in pairs]).to(dtype),
        torch.stack([p.test_patch for p in pairs]).to(dtype),
        stack([p.ref_boxes for p in pairs]),
        stack([p.test_boxes for p in pairs]),
        stack([p.iou_targets for p in pairs]),
        stack([p.cle_targets for p in pairs]),
    )


def smooth_l1(d: torch.Tensor) -> torch.Tensor:
    a = d.abs()
    return torch.where(a < 1, 0.5 * d * d, a - 0.5)


def _check_target(target: torch.Tensor, pred: torch.Tensor, what: str) -> torch.Tensor:
    t = target if target.dim() == pred.dim() else target[:, None]
    try:
        ok = torch.broadcast_shapes(t.shape, pred.shape) == pred.shape
    except RuntimeError:
        ok = False
    if not ok:
        raise ValueError(f"{what} target shape {tuple(target.shape)} does not match {tuple(pred.shape)}")
    return t


def multitask_loss(pred: GroupedPrediction, iou_targets: torch.Tensor, cle_targets: torch.Tensor | None,
                   cfg: LossConfig = LossConfig()):
    """Return ``(total, l_iou, l_cle)``.

    ``pred.iou`` is (B, M, N); targets are (B, N) (shared by every reference
    group) or already (B, M, N). The CLE term averages smooth-L1 over groups,
    proposals and both offset components.
    """
    iou_t = _check_target(iou_targets, pred.iou, "IoU")
    l_iou = ((pred.iou - iou_t) ** 2).mean()
    if pred.cle is None or cle_targets is None:
        return l_iou, l_iou, torch.zeros_like(l_iou)
    cle_t = _check_target(cle_targets, pred.cle, "CLE")
    l_cle = smooth_l1(pred.cle - cle_t).mean()
    return l_iou + cfg.lam * l_cle, l_iou, l_cle


@dataclass
class TrainResult:
    net: CometNet
    history: list[dict]

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.history]


LOG_FIELDS = ("step", "loss", "l_iou", "l_cle", "lr")


def write_log(path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


def sample_batch(dataset: Sequence[SequenceRecord], n: int, rng, cfg: SamplePairConfig) -> list[SamplePair]:
    return [build_sample_pair(dataset[int(rng.integers(len(dataset)))], rng, cfg) for _ in range(n)]


def train(dataset: Sequence[SequenceRecord], net_cfg: NetConfig, train_cfg: TrainConfig,
          sample_cfg: SamplePairConfig | None = None, loss_cfg: LossConfig | None = None,
          ckpt_path=None, log_path=None, on_step: Callable[[dict], None] | None = None,
          net: CometNet | None = None) -> TrainResult:
    """Train from scratch (or continue ``net``) with Adam and a step learning-rate decay."""
    if not dataset:
        raise TrainingError("empty dataset")
    sample_cfg = sample_cfg or SamplePairConfig(out_size=net_cfg.input_size)
    if sample_cfg.out_size != net_cfg.input_size:
        raise TrainingError(f"patch size {sample_cfg.out_size} != network input {net_cfg.input_size}")
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(train_cfg.seed)
    if net is None:
        net = CometNet(net_cfg)
        net.reset_parameters(torch.Generator().manual_seed(train_cfg.seed))
    store = net.params
    if train_cfg.freeze_backbone:
        store.freeze("backbone.")
    params = dict(store.trainable())
    state = AdamState()
    fixed = collate(sample_batch(dataset, train_cfg.batch_size, rng, sample_cfg)) if train_cfg.overfit else None

    net.train()
    history = []
    for step in range(train_cfg.total_steps):
        epoch = step // train_cfg.steps_per_epoch
        lr = step_lr(train_cfg.lr, epoch, train_cfg.lr_decay, train_cfg.decay_every)
        batch = fixed or collate(sample_batch(dataset, train_cfg.batch_size, rng, sample_cfg))
        store.zero_grad()
        pred = net(batch.ref_images, batch.test_images, batch.ref_boxes, batch.test_boxes)
        loss, l_iou, l_cle = multitask_loss(pred, batch.iou_targets, batch.cle_targets, loss_cfg)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}: l_iou={l_iou.item()}, l_cle={l_cle.item()}")
        loss.backward()
        adam_step(params, {n: p.grad for n, p in params.items()}, state, lr, train_cfg.weight_decay)
        row = {"step": step, "loss": loss.item(), "l_iou": l_iou.item(), "l_cle": l_cle.item(), "lr": lr}
        history.append(row)
        if on_step:
            on_step(row)
        if (step + 1) % train_cfg.steps_per_epoch == 0:
            ep = history[-train_cfg.steps_per_epoch:]
            log.info("epoch %d: mean loss %.4f (lr %.2g)", epoch, np.mean([r["loss"] for r in ep]), lr)
    net.eval()
    extra = {"train": dataclasses.asdict(train_cfg), "sample": dataclasses.asdict(sample_cfg),
             "loss": dataclasses.asdict(loss_cfg)}
    if ckpt_path is not None:
        save_net(ckpt_path, net, extra)
    if log_path is not None:
        write_log(log_path, history)
    return TrainResult(net, history)


def synthetic_dataset(n_sequences: int, seed: int, length: int = 100, presets=("easy",)) -> list[SequenceRecord]:
    """Training corpus of synthetic sequences cycling through ``presets``."""
    from comet.evalbench.synth import SynthConfig, synth_sequence

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_sequences):
        preset = presets[i % len(presets)]
        cfg = SynthConfig.preset(preset, rng, length=length)
        out.append(synth_sequence(cfg, int(rng.integers(2**31)), name=f"train_{i:04d}"))
    return out
