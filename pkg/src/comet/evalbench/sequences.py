"""Sequence records and the on-disk layout ``<seq>/frames/NNNNNN.ppm`` + ``groundtruth.txt``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from comet.boxgeom import as_box
from comet.imaging import read_ppm, write_ppm


class SequenceFormatError(ValueError):
    pass


class PPMFrames(Sequence):
    """Lazily decoded frames from a list of PPM paths."""

    def __init__(self, paths):
        self.paths = [Path(p) for p in paths]

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return read_ppm(self.paths[i])


@dataclass
class SequenceRecord:
    name: str
    frames: Sequence  # HxWx3 uint8 arrays, possibly lazy
    gt_boxes: np.ndarray  # (T, 4)
    attributes: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.attributes = frozenset(self.attributes)
        if len(self.frames) != len(self.gt_boxes):
            raise SequenceFormatError(f"{self.name}: {len(self.frames)} frames but {len(self.gt_boxes)} boxes")
        if len(self.gt_boxes) and not np.all(self.gt_boxes[:, 2:] > 0):
            raise SequenceFormatError(f"{self.name}: ground-truth boxes must have positive size")

    def __len__(self):
        return len(self.gt_boxes)

    @property
    def frame_size(self) -> tuple[int, int]:
        """(width, height) of the first frame."""
        h, w = self.frames[0].shape[:2]
        return w, h


def format_box(box) -> str:
    return ",".join(_fmt(v) for v in as_box(box))


def _fmt(v: float) -> str:
    s = f"{float(v):.4f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def parse_boxes(text: str, source: str = "<boxes>") -> np.ndarray:
    """One ``x,y,w,h`` line per frame; LF or CRLF; blank trailing lines ignored."""
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    out = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split(",")
        if len(parts) != 4:
            raise SequenceFormatError(f"{source}: line {lineno}: expected 4 comma-separated fields, got {len(parts)}")
        try:
            out.append([float(p) for p in parts])
        except ValueError:
            raise SequenceFormatError(f"{source}: line {lineno}: non-numeric field in {line!r}") from None
    return np.array(out, dtype=np.float64).reshape(-1, 4)


def write_boxes(path, boxes):
    Path(path).write_text("".join(format_box(b) + "\n" for b in np.asarray(boxes).reshape(-1, 4)))


def load_sequence(seq_dir) -> SequenceRecord:
    seq_dir = Path(seq_dir)
    gt_path = seq_dir / "groundtruth.txt"
    frame_dir = seq_dir / "frames"
    if not gt_path.is_file() or not frame_dir.is_dir():
        raise SequenceFormatError(f"{seq_dir}: expected frames/ and groundtruth.txt")
    boxes = parse_boxes(gt_path.read_text(), str(gt_path))
    paths = sorted(frame_dir.glob("*.ppm"))
    if len(paths) != len(boxes):
        raise SequenceFormatError(f"{seq_dir}: frame count {len(paths)} != ground-truth line count {len(boxes)}")
    attributes: frozenset[str] = frozenset()
    attr_path = seq_dir / "attributes.json"
    if attr_path.is_file():
        attributes = frozenset(json.loads(attr_path.read_text()).get("attributes", []))
    return SequenceRecord(seq_dir.name, PPMFrames(paths), boxes, attributes)


def write_sequence(record: SequenceRecord, seq_dir) -> Path:
    seq_dir = Path(seq_dir)
    frame_dir = seq_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(record)):
        write_ppm(frame_dir / f"{i:06d}.ppm", record.frames[i])
    write_boxes(seq_dir / "groundtruth.txt", record.gt_boxes)
    if record.attributes:
        (seq_dir / "attributes.json").write_text(json.dumps({"attributes": sorted(record.attributes)}) + "\n")
    return seq_dir
