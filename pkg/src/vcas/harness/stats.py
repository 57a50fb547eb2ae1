"""Moving/static instance counts and per-class pixel counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..labels import OFFSET, read_label_png
from .manifest import SPLITS, Manifest


class MissingMotionFlags(ValueError):
    pass


@dataclass
class DatasetStats:
    moving: Dict[str, int] = field(default_factory=lambda: {s: 0 for s in SPLITS})
    static: Dict[str, int] = field(default_factory=lambda: {s: 0 for s in SPLITS})
    pixels: Dict[int, int] = field(default_factory=dict)

    @property
    def total_moving(self) -> int:
        return sum(self.moving.values())

    @property
    def total_static(self) -> int:
        return sum(self.static.values())

    def to_dict(self, names: Dict[int, str] = None) -> dict:
        names = names or {}
        return {
            "instances": {
                s: {"moving": self.moving[s], "static": self.static[s]} for s in SPLITS
            } | {"total": {"moving": self.total_moving, "static": self.total_static}},
            "pixels": {str(c): {"name": names.get(c, str(c)), "count": n}
                       for c, n in sorted(self.pixels.items())},
        }


def compute_stats(m: Manifest) -> DatasetStats:
    """Count instances by motion flag and pixels by class.

    Pixel counts come from the panoptic ground truth (category of each id),
    or from the semantic ground truth when a frame has no panoptic map.
    """
    st = DatasetStats()
    for f in m.frames:
        if f.motion is None:
            raise MissingMotionFlags(f"frame {f.id!r} has no motion flags")
        for moving in f.motion.values():
            if moving:
                st.moving[f.split] += 1
            else:
                st.static[f.split] += 1
        if "panoptic_gt" in f.paths:
            ids = read_label_png(f.path("panoptic_gt"), True).ids
            vals, counts = np.unique(ids[ids > 0], return_counts=True)
            cats = vals // OFFSET
        elif "semantic_gt" in f.paths:
            sem = read_label_png(f.path("semantic_gt"), False).ids
            cats, counts = np.unique(sem, return_counts=True)
        else:
            continue
        for c, n in zip(cats.tolist(), counts.tolist()):
            st.pixels[c] = st.pixels.get(c, 0) + n
    return st
