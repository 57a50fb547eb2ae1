"""Label maps, segment extraction, IoU and the 16-bit PNG label codec.

Panoptic ids follow the Cityscapes convention ``id = category * 1000 + instance``.
Class-agnostic maps carry raw instance ids and no category. Id 0 is void.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ._png import decode_png16, encode_png16

VOID_ID = 0
OFFSET = 1000
_MAX_PNG_ID = 2**16 - 1


def split_id(segment_id: int) -> Tuple[int, int]:
    """Return ``(category, instance)`` for a panoptic id."""
    return int(segment_id) // OFFSET, int(segment_id) % OFFSET


def join_id(category: int, instance: int) -> int:
    if not 0 <= instance < OFFSET:
        raise ValueError(f"instance index {instance} outside [0, {OFFSET})")
    return int(category) * OFFSET + int(instance)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel segment ids, shape ``(height, width)``.

    ``categorized`` says whether ids encode a category (panoptic maps) or are
    raw class-agnostic instance ids.
    """

    ids: np.ndarray
    categorized: bool = False

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {ids.shape}")
        if ids.dtype.kind not in "iu":
            raise TypeError(f"label ids must be integers, got {ids.dtype}")
        if ids.size and (ids.min() < 0 or ids.max() > np.iinfo(np.uint32).max):
            raise ValueError("label ids must fit in 32 unsigned bits")
        ids = ids.astype(np.uint32, copy=False)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ids.shape

    @classmethod
    def zeros(cls, height: int, width: int, categorized: bool = False) -> "LabelMap":
        return cls(np.zeros((height, width), np.uint32), categorized)

    def mask(self, segment_id: int) -> np.ndarray:
        return self.ids == segment_id

    def category_of(self, segment_id: int) -> Optional[int]:
        return split_id(segment_id)[0] if self.categorized else None


@dataclass(frozen=True)
class Segment:
    id: int
    area: int
    category: Optional[int] = None


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    isthing: bool


@dataclass
class CategoryTable:
    entries: List[Category] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for c in self.entries:
            if c.id in seen:
                raise ValueError(f"duplicate category id {c.id}")
            seen.add(c.id)
        self._by_id = {c.id: c for c in self.entries}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, category_id) -> bool:
        return category_id in self._by_id

    def __getitem__(self, category_id: int) -> Category:
        return self._by_id[category_id]

    @property
    def things(self) -> List[int]:
        return [c.id for c in self.entries if c.isthing]

    @property
    def stuff(self) -> List[int]:
        return [c.id for c in self.entries if not c.isthing]

    def require_panoptic(self) -> None:
        if not self.entries:
            raise ValueError("category table is empty")
        if not self.things or not self.stuff:
            raise ValueError("panoptic evaluation needs at least one thing and one stuff category")

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "CategoryTable":
        return cls([Category(int(r["id"]), str(r["name"]), bool(r["isthing"])) for r in records])

    def to_records(self) -> List[dict]:
        return [{"id": c.id, "name": c.name, "isthing": c.isthing} for c in self.entries]


# -- extraction ---------------------------------------------------------------


def extract_segments(m: LabelMap) -> List[Segment]:
    """One :class:`Segment` per distinct nonzero id, sorted by id."""
    ids, counts = np.unique(m.ids, return_counts=True)
    keep = ids != VOID_ID
    return [
        Segment(int(i), int(c), m.category_of(int(i)))
        for i, c in zip(ids[keep], counts[keep])
    ]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean pixel masks of equal shape."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("iou is undefined for an empty segment")
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union


def _compact(ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Map ids to dense indices. Returns ``(unique_ids, index_per_pixel)``.

    Uses a bincount lookup table when ids fit in 16 bits, which avoids the
    sort inside ``np.unique`` on large frames.
    """
    flat = ids.ravel()
    if flat.size and int(flat.max()) <= _MAX_PNG_ID:
        present = np.bincount(flat, minlength=1) > 0
        uniq = np.flatnonzero(present).astype(np.uint32)
        lut = np.zeros(present.size, np.int32)
        lut[uniq] = np.arange(uniq.size, dtype=np.int32)
        return uniq, lut[flat]
    uniq, inv = np.unique(flat, return_inverse=True)
    return uniq.astype(np.uint32), inv.ravel()


def overlap_counts(pred: LabelMap, gt: LabelMap):
    """Dense contingency matrix.

    Returns ``(pred_ids, gt_ids, counts)`` with ``counts[i, j]`` the number of
    pixels labelled ``pred_ids[i]`` in ``pred`` and ``gt_ids[j]`` in ``gt``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: pred {pred.shape} vs gt {gt.shape}")
    p_ids, p_idx = _compact(pred.ids)
    g_ids, g_idx = _compact(gt.ids)
    if p_ids.size * g_ids.size < 2**31:
        joint = p_idx.astype(np.int32, copy=False) * np.int32(g_ids.size) + g_idx.astype(np.int32, copy=False)
    else:
        joint = p_idx.astype(np.int64) * g_ids.size + g_idx
    counts = np.bincount(joint, minlength=p_ids.size * g_ids.size)
    return p_ids, g_ids, counts.reshape(p_ids.size, g_ids.size)


def contingency_table(pred: LabelMap, gt: LabelMap) -> Dict[Tuple[int, int], int]:
    """Map ``(pred id, gt id) -> overlapping pixel count``; void pairings included."""
    p_ids, g_ids, counts = overlap_counts(pred, gt)
    rows, cols = np.nonzero(counts)
    return {
        (int(p_ids[r]), int(g_ids[c])): int(counts[r, c]) for r, c in zip(rows, cols)
    }


# -- PNG codec ----------------------------------------------------------------


def decode_panoptic_png(data: bytes, categorized: bool = True) -> LabelMap:
    """Decode a 16-bit single-channel PNG into a :class:`LabelMap`."""
    return LabelMap(decode_png16(data, 1).astype(np.uint32), categorized)


def encode_panoptic_png(m: LabelMap) -> bytes:
    if m.ids.size and int(m.ids.max()) > _MAX_PNG_ID:
        raise ValueError("ids above 65535 do not fit a 16-bit PNG")
    return encode_png16(m.ids.astype(np.uint16))


def read_label_png(path, categorized: bool = True) -> LabelMap:
    with open(path, "rb") as f:
        return decode_panoptic_png(f.read(), categorized)


def write_label_png(path, m: LabelMap) -> None:
    with open(path, "wb") as f:
        f.write(encode_panoptic_png(m))


# Binary sidecar: uint32 height, uint32 width, then little-endian uint32 ids.


def encode_ids_sidecar(m: LabelMap) -> bytes:
    header = np.array([m.height, m.width], "<u4").tobytes()
    return header + m.ids.astype("<u4").tobytes()


def decode_ids_sidecar(data: bytes, categorized: bool = False) -> LabelMap:
    if len(data) < 8:
        raise ValueError("sidecar too short")
    h, w = np.frombuffer(data[:8], "<u4")
    body = np.frombuffer(data[8:], "<u4")
    if body.size != int(h) * int(w):
        raise ValueError(f"sidecar holds {body.size} ids, header says {h}x{w}")
    return LabelMap(body.reshape(int(h), int(w)).astype(np.uint32), categorized)


def segments_by_id(segments: Sequence[Segment]) -> Dict[int, Segment]:
    return {s.id: s for s in segments}
