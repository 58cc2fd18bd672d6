"""Named parameter store and the binary checkpoint format.

Checkpoint layout: one UTF-8 JSON line (terminated by ``\\n``) followed by raw
little-endian float32 data. The header carries ``schema_version``, an optional
``config`` object and a ``manifest`` list of ``{name, shape, offset}`` entries;
offsets are byte offsets from the start of the data block, in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """View over a module's parameters (trainable) and buffers (running statistics)."""

    def __init__(self, module: nn.Module):
        self.module = module

    def names(self) -> list[str]:
        return [n for n, _ in self.module.named_parameters()]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: tuple(p.shape) for n, p in self.module.named_parameters()}

    def __getitem__(self, name: str) -> torch.Tensor:
        return dict(self.module.named_parameters())[name]

    def trainable(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.module.named_parameters() if p.requires_grad]

    def freeze(self, prefix: str) -> int:
        count = 0
        for n, p in self.module.named_parameters():
            if n.startswith(prefix):
                p.requires_grad_(False)
                count += 1
        return count

    def zero_grad(self):
        for p in self.module.parameters():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor | None]:
        return {n: p.grad for n, p in self.module.named_parameters()}

    def state(self) -> dict[str, torch.Tensor]:
        """Parameters and float buffers, in a stable order."""
        out = {n: p for n, p in self.module.named_parameters()}
        for n, b in self.module.named_buffers():
            if b.is_floating_point():
                out[n] = b
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy().copy() for n, t in self.state().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        state = self.state()
        missing = set(state) - set(snap)
        extra = set(snap) - set(state)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        with torch.no_grad():
            for n, t in state.items():
                src = torch.as_tensor(snap[n])
                if tuple(src.shape) != tuple(t.shape):
                    raise CheckpointError(f"{n}: checkpoint shape {tuple(src.shape)} != model shape {tuple(t.shape)}")
                t.copy_(src.to(t.dtype))


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None):
    manifest, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        offset += len(data)
        blobs.append(data)
    header = {"schema_version": SCHEMA_VERSION, "config": config or {}, "manifest": manifest,
              "data_bytes": offset}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    data = raw[nl + 1:]
    if len(data) != header["data_bytes"]:
        raise CheckpointError(f"{path}: expected {header['data_bytes']} data bytes, found {len(data)}")
    out = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return out, header["config"]
