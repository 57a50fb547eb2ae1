"""Dataset manifests.

A manifest is a JSON document. Paths are relative to the manifest's own
directory, so a dataset root can be moved as a whole::

    {
      "version": 1,
      "categories": [{"id": 26, "name": "car", "isthing": true}, ...],
      "class_names": {"40": "traffic cone"},
      "openset": {"known": [7, 23, 24, 26], "unknown_id": 40, "ignore_id": 0},
      "frames": [
        {
          "id": "seq00_000010",
          "split": "test",
          "panoptic_gt": "gt/seq00_000010_panoptic.png",
          "panoptic_pred": "pred/seq00_000010_panoptic.png",
          "ca_gt": "...", "ca_pred": "...", "ca_void": "...",
          "semantic_gt": "...", "semantic_pred": "...",
          "flow": "...", "depth": "...",
          "embeddings": "....vct", "features": "....vct", "class_mask": "...png",
          "intrinsics": {"fx": 721.5, "fy": 721.5, "cx": 609.6, "cy": 172.9},
          "pose": {"R": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "t": [0, 0, 0.8]},
          "motion": {"26001": true, "26002": false}
        }
      ]
    }

``categories`` may also be a path to a JSON file holding that list.
``motion`` maps ground-truth instance ids (as strings) to a moving flag.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from ..egoflow import CameraIntrinsics, PoseSE3
from ..labels import CategoryTable

PATH_KEYS = (
    "panoptic_gt", "panoptic_pred", "ca_gt", "ca_pred", "ca_void",
    "semantic_gt", "semantic_pred", "flow", "depth",
    "embeddings", "features", "class_mask",
)
SPLITS = ("train", "test")


class ManifestError(ValueError):
    """Base class for manifest problems."""


class ManifestSchemaError(ManifestError):
    pass


class DuplicateFrameError(ManifestError):
    pass


class MissingFileError(ManifestError):
    pass


@dataclass
class OpenSetSpec:
    known: List[int]
    unknown_id: int
    ignore_id: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"known": list(self.known), "unknown_id": self.unknown_id}
        if self.ignore_id is not None:
            d["ignore_id"] = self.ignore_id
        return d


@dataclass
class Frame:
    id: str
    split: str
    paths: Dict[str, Path] = field(default_factory=dict)
    intrinsics: Optional[CameraIntrinsics] = None
    pose: Optional[PoseSE3] = None
    motion: Optional[Dict[int, bool]] = None

    def path(self, key: str) -> Path:
        try:
            return self.paths[key]
        except KeyError:
            raise KeyError(f"frame {self.id!r} has no {key!r} entry") from None


@dataclass
class Manifest:
    frames: List[Frame] = field(default_factory=list)
    categories: CategoryTable = field(default_factory=CategoryTable)
    class_names: Dict[int, str] = field(default_factory=dict)
    openset: Optional[OpenSetSpec] = None
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.frames)

    def select(self, split: Optional[str]) -> "Manifest":
        if split is None:
            return self
        return Manifest([f for f in self.frames if f.split == split], self.categories,
                        self.class_names, self.openset, self.root)


def _frame_from_dict(d: dict, root: Path, index: int) -> Frame:
    where = f"frames[{index}]"
    if not isinstance(d, dict):
        raise ManifestSchemaError(f"{where} must be an object")
    if "id" not in d:
        raise ManifestSchemaError(f"{where} has no 'id'")
    fid = str(d["id"])
    split = d.get("split", "test")
    if split not in SPLITS:
        raise ManifestSchemaError(f"frame {fid!r}: split must be one of {SPLITS}, got {split!r}")
    known = set(PATH_KEYS) | {"id", "split", "intrinsics", "pose", "motion"}
    extra = sorted(set(d) - known)
    if extra:
        raise ManifestSchemaError(f"frame {fid!r}: unknown keys {extra}")
    paths = {k: (root / d[k]) for k in PATH_KEYS if d.get(k) is not None}
    try:
        intr = CameraIntrinsics.from_dict(d["intrinsics"]) if "intrinsics" in d else None
        pose = PoseSE3.from_dict(d["pose"]) if "pose" in d else None
        if pose is not None:
            pose.check(1e-6)
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestSchemaError(f"frame {fid!r}: bad camera entry: {e}") from e
    motion = None
    if "motion" in d:
        if not isinstance(d["motion"], dict):
            raise ManifestSchemaError(f"frame {fid!r}: motion must map instance ids to booleans")
        motion = {int(k): bool(v) for k, v in d["motion"].items()}
    return Frame(fid, split, paths, intr, pose, motion)


def manifest_from_dict(doc: dict, root: Path, check_files: bool = True) -> Manifest:
    if not isinstance(doc, dict):
        raise ManifestSchemaError("manifest must be a JSON object")
    version = doc.get("version", 1)
    if version != 1:
        raise ManifestSchemaError(f"unsupported manifest version {version!r}")
    frames_doc = doc.get("frames", [])
    if not isinstance(frames_doc, list):
        raise ManifestSchemaError("'frames' must be a list")

    cats = doc.get("categories", [])
    if isinstance(cats, str):
        cat_path = root / cats
        if not cat_path.exists():
            raise MissingFileError(f"category table {str(cat_path)!r} not found")
        cats = json.loads(cat_path.read_text())
    try:
        table = CategoryTable.from_records(cats)
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestSchemaError(f"bad category table: {e}") from e

    openset = None
    if doc.get("openset") is not None:
        o = doc["openset"]
        try:
            openset = OpenSetSpec([int(k) for k in o["known"]], int(o["unknown_id"]),
                                  None if o.get("ignore_id") is None else int(o["ignore_id"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestSchemaError(f"bad openset entry: {e}") from e

    frames = [_frame_from_dict(d, root, i) for i, d in enumerate(frames_doc)]
    seen = set()
    for f in frames:
        if f.id in seen:
            raise DuplicateFrameError(f"duplicate frame id {f.id!r}")
        seen.add(f.id)
    if check_files:
        missing = [f"{f.id}:{k}={p}" for f in frames for k, p in f.paths.items() if not p.exists()]
        if missing:
            raise MissingFileError("missing files: " + ", ".join(missing))
    names = {int(k): str(v) for k, v in doc.get("class_names", {}).items()}
    return Manifest(frames, table, names, openset, root)


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Read and validate a manifest; every invariant is checked eagerly."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestSchemaError(f"{path}: not valid JSON ({e})") from e
    return manifest_from_dict(doc, path.parent, check_files)


def manifest_to_dict(m: Manifest, root: Optional[Path] = None) -> dict:
    root = Path(root if root is not None else m.root)
    frames = []
    for f in m.frames:
        d = {"id": f.id, "split": f.split}
        for k in PATH_KEYS:
            if k in f.paths:
                d[k] = Path(os.path.relpath(f.paths[k], root)).as_posix()
        if f.intrinsics is not None:
            d["intrinsics"] = f.intrinsics.to_dict()
        if f.pose is not None:
            d["pose"] = f.pose.to_dict()
        if f.motion is not None:
            d["motion"] = {str(k): v for k, v in sorted(f.motion.items())}
        frames.append(d)
    doc = {"version": 1, "categories": m.categories.to_records()}
    if m.class_names:
        doc["class_names"] = {str(k): v for k, v in sorted(m.class_names.items())}
    if m.openset is not None:
        doc["openset"] = m.openset.to_dict()
    doc["frames"] = frames
    return doc


def save_manifest(m: Manifest, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(manifest_to_dict(m, path.parent), indent=2) + "\n")
