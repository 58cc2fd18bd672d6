"""Shape-checked differentiable primitives used by the network.

Each function is a thin layer over ``torch.nn.functional``; autograd records the
backward rule. The checks exist so a mis-wired graph fails with the primitive
name and the offending shapes instead of a deep torch traceback.
"""

from __future__ import annotations

from contextlib import contextmanager

import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


def _need(cond: bool, prim: str, *shapes):
    if not cond:
        raise ShapeError(f"{prim}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def conv_out_size(n: int, k: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def deconv_out_size(n: int, k: int, stride: int = 1, padding: int = 0,
                    output_padding: int = 0, dilation: int = 1) -> int:
    return (n - 1) * stride - 2 * padding + dilation * (k - 1) + output_padding + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """``x`` (B, Cin, H, W), ``weight`` (Cout, Cin, kh, kw)."""
    _need(x.dim() == 4 and weight.dim() == 4 and x.shape[1] == weight.shape[1],
          "conv2d", x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, dilation=dilation)


def deconv2d(x, weight, bias=None, stride=2, padding=1, output_padding=1, dilation=1):
    """Transposed convolution, ``weight`` (Cin, Cout, kh, kw)."""
    _need(x.dim() == 4 and weight.dim() == 4 and x.shape[1] == weight.shape[0],
          "deconv2d", x.shape, weight.shape)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding,
                              output_padding=output_padding, dilation=dilation)


def linear(x, weight, bias=None):
    _need(x.shape[-1] == weight.shape[1], "linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def batch_norm(x, running_mean, running_var, weight, bias, training: bool,
               momentum: float = 0.1, eps: float = 1e-5):
    """Batch statistics while training (running averages updated), running averages otherwise."""
    _need(x.dim() >= 2 and x.shape[1] == running_mean.shape[0], "batch_norm", x.shape, running_mean.shape)
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


_kink_sides: list | None = None


@contextmanager
def kink_pattern():
    """Collect which side of zero every leaky-ReLU input falls on inside the block."""
    global _kink_sides
    prev, _kink_sides = _kink_sides, []
    try:
        yield _kink_sides
    finally:
        _kink_sides = prev


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    if _kink_sides is not None:
        _kink_sides.append((x.detach() > 0).reshape(-1))
    return F.leaky_relu(x, slope)


def sigmoid(x):
    return torch.sigmoid(x)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C)."""
    _need(x.dim() == 4, "global_avg_pool", x.shape)
    return x.mean(dim=(2, 3))


def avg_pool3(x):
    """3x3 average pool, stride 1, zero padding counted in the divisor."""
    _need(x.dim() == 4, "avg_pool3", x.shape)
    return F.avg_pool2d(x, 3, stride=1, padding=1)


def add(a, b):
    _need(a.shape == b.shape, "add", a.shape, b.shape)
    return a + b


def mul(a, b):
    _need(a.shape == b.shape, "mul", a.shape, b.shape)
    return a * b


def expand_as(small, like):
    """Broadcast ``small`` over the trailing singleton axes of ``like``."""
    try:
        return small.expand_as(like)
    except RuntimeError:
        raise ShapeError(f"expand: cannot broadcast {tuple(small.shape)} to {tuple(like.shape)}") from None


def concat(xs, dim: int = 1):
    ref = list(xs[0].shape)
    for x in xs[1:]:
        s = list(x.shape)
        _need(len(s) == len(ref) and all(a == b for i, (a, b) in enumerate(zip(s, ref)) if i != dim % len(ref)),
              "concat", *(x.shape for x in xs))
    return torch.cat(xs, dim=dim)


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {name}")
    return t
