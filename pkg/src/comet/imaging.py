"""Binary PPM I/O and square patch extraction."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from comet.boxgeom import CropSpec


class ImageFormatError(ValueError):
    pass


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"write_ppm needs HxWx3 uint8, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    return out, pos


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise ImageFormatError(f"{path}: unsupported image magic {data[:2]!r} (only binary P6 PPM is read)")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} not supported")
    pos += 1  # single whitespace before the raster
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).copy()


def extract_patch(frame: np.ndarray, crop: CropSpec, dtype=torch.float32) -> torch.Tensor:
    """Bilinearly resample ``crop``'s window of an HxWx3 frame to a (3, S, S) tensor in [0, 1].

    Pixel ``p`` covers ``[p, p + 1)``; samples outside the frame replicate the border.
    """
    img = torch.as_tensor(np.ascontiguousarray(frame))
    img = img.to(dtype).permute(2, 0, 1)[None]
    if frame.dtype == np.uint8:
        img = img / 255.0
    H, W = frame.shape[:2]
    S = crop.out_size
    # output pixel centres in frame coordinates, then normalised for grid_sample (align_corners=False)
    t = (torch.arange(S, dtype=dtype) + 0.5) * (crop.side / S)
    xs = (crop.x0 + t) / W * 2 - 1
    ys = (crop.y0 + t) / H * 2 - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack([gx, gy], dim=-1)[None]
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0]


def to_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    return f[..., 0] * 0.299 + f[..., 1] * 0.587 + f[..., 2] * 0.114
