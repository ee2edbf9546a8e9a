"""Domain records shared by every stage of the pipeline.

Positions are image-centered: the origin sits at the image center and the
y-axis points up, so orientation angles follow ``atan2`` semantics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple


class InputError(ValueError):
    """Malformed or inconsistent user-supplied data."""


def to_centered_coords(col, row, width, height):
    """Map a pixel-grid location to the image-centered, y-up frame.

    ``x = col - W/2`` and ``y = (H - 1)/2 - row``: in a 4x4 image pixel
    (col=2, row=1) maps to (0, 0.5).
    """
    if not (0 <= col < width and 0 <= row < height):
        raise InputError(
            f"pixel ({col}, {row}) outside a {width}x{height} image")
    return col - width / 2, (height - 1) / 2 - row


def to_pixel_coords(x, y, width, height):
    """Inverse of :func:`to_centered_coords`."""
    return x + width / 2, (height - 1) / 2 - y


@dataclass(frozen=True)
class PartRealization:
    image_id: str
    layer: int
    part_id: int
    x: float
    y: float
    score: float = 1.0

    def __post_init__(self):
        if self.layer < 1:
            raise InputError(f"layer must be >= 1, got {self.layer}")
        if self.part_id < 0:
            raise InputError(f"part_id must be >= 0, got {self.part_id}")
        if not self.score >= 0:
            raise InputError(f"score must be >= 0, got {self.score}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    object_id: str
    category: int
    pose: float
    parts: Tuple[PartRealization, ...]
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.category < 1:
            raise InputError(f"category labels start at 1, got {self.category}")
        if not 0 <= self.pose < 360:
            raise InputError(f"pose must lie in [0, 360), got {self.pose}")
        for p in self.parts:
            if p.image_id != self.image_id:
                raise InputError(
                    f"part of image {p.image_id!r} filed under {self.image_id!r}")

    def layer_parts(self, layer: int) -> List[PartRealization]:
        return [p for p in self.parts if p.layer == layer]

    def positions(self, layer: int):
        import numpy as np
        pts = [(p.x, p.y) for p in self.parts if p.layer == layer]
        return np.array(pts, dtype=float).reshape(-1, 2)

    @property
    def n_layers(self) -> int:
        return max((p.layer for p in self.parts), default=0)


@dataclass(frozen=True)
class DatasetManifest:
    """Records plus the object-wise train/test splits declared for them.

    ``splits`` maps a split name to ``{"train": [...], "test": [...]}``
    lists of object ids; train and test sets must be disjoint.
    """

    n_layers: int
    records: Tuple[ImageRecord, ...]
    categories: Tuple[str, ...] = ()
    splits: Dict[str, Dict[str, Tuple[str, ...]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_layers < 1:
            raise InputError("a manifest needs at least one layer")
        for r in self.records:
            for p in r.parts:
                if p.layer > self.n_layers:
                    raise InputError(
                        f"image {r.image_id}: layer {p.layer} exceeds L={self.n_layers}")
        for name, split in self.splits.items():
            check_disjoint_split(split.get("train", ()), split.get("test", ()), name)

    @property
    def object_ids(self) -> List[str]:
        seen: Dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.object_id, None)
        return list(seen)

    def objects_by_category(self) -> Dict[int, List[str]]:
        out: Dict[int, List[str]] = {}
        for r in self.records:
            ids = out.setdefault(r.category, [])
            if r.object_id not in ids:
                ids.append(r.object_id)
        return dict(sorted(out.items()))

    def subset(self, object_ids: Iterable[str]) -> List[ImageRecord]:
        keep = set(object_ids)
        return [r for r in self.records if r.object_id in keep]


def check_disjoint_split(train: Sequence[str], test: Sequence[str],
                         name: Optional[str] = None) -> None:
    overlap = set(train) & set(test)
    if overlap:
        label = f"split {name!r}" if name else "split"
        raise InputError(
            f"{label} shares objects between train and test: {sorted(overlap)}")
