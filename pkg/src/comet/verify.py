"""Self-check suites with fixed seeds: exact IoU geometry, whole-network gradcheck, grouped equivalence."""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from comet import boxgeom as bg
from comet.cometnet import CometNet, NetConfig
from comet.diffcore import numeric_grad, piecewise_numeric_grad, rel_error
from comet.diffcore.primitives import kink_pattern


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance) if self.tolerance > 0 else self.max_error == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max err {self.max_error:.3e} (tol {self.tolerance:g})"


def _raster_len(a0: int, a1: int, b0: int, b1: int) -> int:
    return len(set(range(a0, a1)) & set(range(b0, b1)))


def rational_iou(a, b) -> Fraction:
    """Exact IoU of integer boxes from per-axis unit-cell rasters."""
    ax, ay, aw, ah = (int(v) for v in a)
    bx, by, bw, bh = (int(v) for v in b)
    inter = _raster_len(ax, ax + aw, bx, bx + bw) * _raster_len(ay, ay + ah, by, by + bh)
    return Fraction(inter, aw * ah + bw * bh - inter)


def exact_iou(a, b) -> Fraction:
    """Exact IoU of real boxes in rational arithmetic (floats convert losslessly)."""
    ax, ay, aw, ah = (Fraction(float(v)) for v in a)
    bx, by, bw, bh = (Fraction(float(v)) for v in b)
    iw = max(Fraction(0), min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(Fraction(0), min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def geometry_suite(n_int: int = 100_000, n_real: int = 10_000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    xy = rng.integers(0, 48, size=(2, n_int, 2))
    wh = rng.integers(1, 24, size=(2, n_int, 2))
    a = np.concatenate([xy[0], wh[0]], axis=1).astype(np.float64)
    b = np.concatenate([xy[1], wh[1]], axis=1).astype(np.float64)
    analytic = bg.iou_many(a, b)
    # exact match: the analytic float must equal the correctly rounded rational
    worst = max(abs(float(v) - float(rational_iou(p, q))) for v, p, q in zip(analytic, a, b))
    out = [CheckResult(f"integer IoU vs rational raster ({n_int} pairs)", float(worst), 0.0,
                       time.perf_counter() - t0)]

    t0 = time.perf_counter()
    ra = np.concatenate([rng.uniform(-50, 50, (n_real, 2)), rng.uniform(0.1, 40, (n_real, 2))], axis=1)
    rb = np.concatenate([rng.uniform(-50, 50, (n_real, 2)), rng.uniform(0.1, 40, (n_real, 2))], axis=1)
    analytic = bg.iou_many(ra, rb)
    worst = max(abs(float(v) - float(exact_iou(p, q))) for v, p, q in zip(analytic, ra, rb))
    out.append(CheckResult(f"real IoU vs exact rational ({n_real} pairs)", float(worst), 1e-9,
                           time.perf_counter() - t0))
    return out


def _tiny_inputs(cfg: NetConfig, n_ref: int, n_test: int, seed: int, batch: int = 1):
    g = torch.Generator().manual_seed(seed)
    S = cfg.input_size
    ref = torch.rand(batch, 3, S, S, generator=g)
    test = torch.rand(batch, 3, S, S, generator=g)

    def boxes(n):
        xy = torch.rand(batch, n, 2, generator=g) * S * 0.4 + S * 0.1
        wh = torch.rand(batch, n, 2, generator=g) * S * 0.3 + S * 0.15
        return torch.cat([xy, wh], dim=-1)

    return ref, test, boxes(n_ref), boxes(n_test)


def _calibrated_net(cfg: NetConfig, seed: int) -> CometNet:
    """Random net in float64 whose BN running statistics come from a few train-mode passes."""
    net = CometNet(cfg).double()
    net.reset_parameters(torch.Generator().manual_seed(seed))
    net.train()
    with torch.no_grad():
        for k in range(3):
            ref, test, rb, tb = _tiny_inputs(cfg, 2, 4, seed + 100 + k, batch=2)
            net(ref.double(), test.double(), rb.double(), tb.double())
    return net.eval()


def gradcheck_suite(seed: int = 0, eps: float = 1e-4, tol: float = 1e-3) -> list[CheckResult]:
    """Every parameter and every test-box coordinate against central differences (tiny config, float64)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        cfg = NetConfig.tiny()
        net = _calibrated_net(cfg, seed)
        ref, test, rb, tb = _tiny_inputs(cfg, 2, 4, seed)
        tb = tb.clone().requires_grad_(True)
        g = torch.Generator().manual_seed(seed + 1)
        w_iou = torch.randn(1, 2, 4, generator=g)
        w_cle = torch.randn(1, 2, 4, 2, generator=g)

        def objective():
            with kink_pattern() as sides:
                pred = net(ref, test, rb, tb)
                value = (pred.iou * w_iou).sum() + (pred.cle * w_cle).sum()
            return value, torch.cat(sides)

        t0 = time.perf_counter()
        net.zero_grad()
        objective()[0].backward()
        worst_p, shrunk, straddling = 0.0, 0, 0
        for _, p in net.named_parameters():
            num, s, k = piecewise_numeric_grad(objective, p.data, eps)
            worst_p = max(worst_p, float(rel_error(p.grad.numpy(), num).max()))
            shrunk, straddling = shrunk + s, straddling + k
        n_params = sum(p.numel() for p in net.parameters())
        res = [CheckResult(f"parameter gradients ({n_params} entries, {shrunk} with a reduced step, "
                           f"{straddling} straddling a kink)", worst_p, tol, time.perf_counter() - t0)]

        t0 = time.perf_counter()
        num, _, _ = piecewise_numeric_grad(objective, tb.data, eps)
        worst_b = float(rel_error(tb.grad.numpy(), num).max())
        res.append(CheckResult("test-box coordinate gradients (2 refs x 4 proposals)", worst_b, tol,
                               time.perf_counter() - t0))
        return res
    finally:
        torch.set_default_dtype(prev)


def group_equivalence_suite(seed: int = 0, n_ref: int = 4, n_test: int = 8, tol: float = 1e-6) -> list[CheckResult]:
    """Grouped M-reference forward vs M stacked single-reference forwards."""
    cfg = NetConfig.desk()
    net = _calibrated_net(cfg, seed)
    ref, test, rb, tb = (t.double() for t in _tiny_inputs(cfg, n_ref, n_test, seed, batch=2))
    t0 = time.perf_counter()
    with torch.no_grad():
        feats = net.features(torch.cat([ref, test]))
        ref_feat, test_feat = feats[:2], feats[2:]
        mods = net.reference_modulation(ref_feat, rb)
        grouped = net.grouped_heads(test_feat, mods, tb)
        singles = [net.grouped_heads(test_feat, net.reference_modulation(ref_feat, rb[:, m:m + 1]), tb)
                   for m in range(n_ref)]
    iou = torch.cat([s.iou for s in singles], dim=1)
    cle = torch.cat([s.cle for s in singles], dim=1)
    err = max(float((grouped.iou - iou).abs().max()), float((grouped.cle - cle).abs().max()))
    return [CheckResult(f"grouped vs stacked single-reference ({n_ref} refs x {n_test} proposals)", err, tol,
                        time.perf_counter() - t0)]


SUITES = {
    "geometry": geometry_suite,
    "gradcheck": gradcheck_suite,
    "group-equiv": group_equivalence_suite,
}


def run_suites(names, seed: int = 0) -> list[CheckResult]:
    results = []
    for name in names:
        results.extend(SUITES[name](seed=seed))
    return results
