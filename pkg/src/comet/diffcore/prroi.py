"""Precise RoI pooling: exact bin averages of a bilinearly interpolated map.

The interpolated surface is ``f(x, y) = sum_ij F[i, j] tri(y - i) tri(x - j)``
with ``tri(t) = max(0, 1 - |t|)`` and cells outside the map reading as zero.
Because the kernel is separable, the integral of ``f`` over a bin
``[a, b] x [c, d]`` factorises into two 1-D weight vectors built from the
antiderivative of ``tri``::

    integral = sum_ij F[i, j] * (T(d - i) - T(c - i)) * (T(b - j) - T(a - j))

Feature cell ``j`` is centred at coordinate ``j``. The derivative of the weight
with respect to a bin edge is ``tri`` evaluated at that edge, which gives the
coordinate gradients in closed form.
"""

from __future__ import annotations

import torch

from comet.boxgeom import InvalidBoxError


def tri(t: torch.Tensor) -> torch.Tensor:
    return (1.0 - t.abs()).clamp(min=0.0)


def tri_integral(t: torch.Tensor) -> torch.Tensor:
    """Antiderivative of ``tri`` that is 0 below -1 and 1 above +1."""
    t = t.clamp(-1.0, 1.0)
    neg = 0.5 * (t + 1.0) ** 2
    pos = 1.0 - 0.5 * (1.0 - t) ** 2
    return torch.where(t <= 0, neg, pos)


def _edges(start: torch.Tensor, size: torch.Tensor, bins: int):
    """Bin edge coordinates ``(lo, hi)`` of shape ``(..., bins)`` and their fractional positions."""
    k = torch.arange(bins, dtype=start.dtype, device=start.device)
    step = (size / bins).unsqueeze(-1)
    lo = start.unsqueeze(-1) + k * step
    return lo, lo + step, k / bins, (k + 1) / bins


def _axis_weights(start, size, bins, length):
    """Integrated interpolation weights, shape ``(..., bins, length)``, plus edge data for backward."""
    lo, hi, flo, fhi = _edges(start, size, bins)
    grid = torch.arange(length, dtype=start.dtype, device=start.device)
    d_lo = lo.unsqueeze(-1) - grid
    d_hi = hi.unsqueeze(-1) - grid
    weights = tri_integral(d_hi) - tri_integral(d_lo)
    return weights, d_lo, d_hi, flo, fhi


class _PrRoIPool(torch.autograd.Function):
    @staticmethod
    def forward(ctx, feat, boxes, rows: int, cols: int):
        # feat (G, C, H, W); boxes (G, N, 4) as x, y, w, h in feature cells
        _, _, H, W = feat.shape
        x, y, w, h = boxes.unbind(-1)
        wx, dxl, dxh, fxl, fxh = _axis_weights(x, w, cols, W)  # (G, N, cols, W)
        wy, dyl, dyh, fyl, fyh = _axis_weights(y, h, rows, H)  # (G, N, rows, H)
        inv_area = (rows * cols) / (w * h)  # (G, N)
        # partial[g, n, c, h, s] = sum_w F[g, c, h, w] * wx[g, n, s, w]
        partial = torch.einsum("gchw,gnsw->gnchs", feat, wx)
        out = torch.einsum("gnchs,gnrh->gncrs", partial, wy) * inv_area[..., None, None, None]
        ctx.save_for_backward(feat, boxes, wx, wy, dxl, dxh, dyl, dyh, fxl, fxh, fyl, fyh, out, inv_area)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        feat, boxes, wx, wy, dxl, dxh, dyl, dyh, fxl, fxh, fyl, fyh, out, inv_area = ctx.saved_tensors
        grad_feat = grad_boxes = None
        g = grad_out * inv_area[..., None, None, None]  # (G, N, C, R, S)
        if ctx.needs_input_grad[0]:
            tmp = torch.einsum("gncrs,gnrh->gnchs", g, wy)
            grad_feat = torch.einsum("gnchs,gnsw->gchw", tmp, wx)
        if ctx.needs_input_grad[1]:
            # sensitivity of the loss to each integrated weight
            fy = torch.einsum("gchw,gnrh->gncrw", feat, wy)
            px = torch.einsum("gncrs,gncrw->gnsw", g, fy)
            fx = torch.einsum("gchw,gnsw->gnchs", feat, wx)
            py = torch.einsum("gncrs,gnchs->gnrh", g, fx)
            tx_lo, tx_hi = tri(dxl), tri(dxh)
            ty_lo, ty_hi = tri(dyl), tri(dyh)
            d_x = (px * (tx_hi - tx_lo)).sum((-2, -1))
            d_y = (py * (ty_hi - ty_lo)).sum((-2, -1))
            d_w = (px * (tx_hi * fxh[:, None] - tx_lo * fxl[:, None])).sum((-2, -1))
            d_h = (py * (ty_hi * fyh[:, None] - ty_lo * fyl[:, None])).sum((-2, -1))
            # 1/area normalisation
            go = (grad_out * out).sum((-3, -2, -1))
            x, y, w, h = boxes.unbind(-1)
            d_w = d_w - go / w
            d_h = d_h - go / h
            grad_boxes = torch.stack([d_x, d_y, d_w, d_h], dim=-1)
        return grad_feat, grad_boxes, None, None


def prroi_pool(feat: torch.Tensor, boxes: torch.Tensor, bins=(5, 5)) -> torch.Tensor:
    """Pool ``N`` boxes from each of ``G`` maps.

    ``feat`` is ``(G, C, H, W)`` and ``boxes`` is ``(G, N, 4)`` in feature-cell
    coordinates. Returns ``(G, N, C, rows, cols)``. Gradients flow to both the
    features and the box coordinates.
    """
    rows, cols = (bins, bins) if isinstance(bins, int) else bins
    if rows < 1 or cols < 1:
        raise ValueError(f"bins must be >= 1, got {(rows, cols)}")
    if feat.dim() != 4 or boxes.dim() != 3 or boxes.shape[-1] != 4 or boxes.shape[0] != feat.shape[0]:
        raise ValueError(f"prroi_pool: expected feat (G,C,H,W) and boxes (G,N,4), got "
                         f"{tuple(feat.shape)} and {tuple(boxes.shape)}")
    if boxes.shape[1] and not bool((boxes[..., 2:] > 0).all()):
        raise InvalidBoxError("prroi_pool: boxes must have positive width and height")
    return _PrRoIPool.apply(feat, boxes.to(feat.dtype), rows, cols)


def prroi_pool_single(feat: torch.Tensor, box, bins=(5, 5)) -> torch.Tensor:
    """One box on one ``(C, H, W)`` map; returns ``(C, rows, cols)``."""
    box = torch.as_tensor(box, dtype=feat.dtype).reshape(1, 1, 4)
    return prroi_pool(feat.unsqueeze(0), box, bins)[0, 0]


def bilinear_sample(feat: torch.Tensor, x, y) -> torch.Tensor:
    """Per-channel bilinear read of a ``(C, H, W)`` map at continuous ``(x, y)``; zero outside."""
    C, H, W = feat.shape
    x = torch.as_tensor(x, dtype=feat.dtype)
    y = torch.as_tensor(y, dtype=feat.dtype)
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    out = feat.new_zeros(C)
    for dy in (0, 1):
        for dx in (0, 1):
            cx, cy = x0 + dx, y0 + dy
            wgt = tri(x - cx) * tri(y - cy)
            ix, iy = int(cx), int(cy)
            if 0 <= ix < W and 0 <= iy < H:
                out = out + wgt * feat[:, iy, ix]
    return out
