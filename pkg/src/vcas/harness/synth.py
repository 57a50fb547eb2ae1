"""Deterministic synthetic scenes with known answers.

A scene is a pinhole view of a tilted background plane split into two stuff
regions, with non-overlapping fronto-parallel objects in front of it. The
camera moves between frames, some objects move on their own, and every
object gets a "prediction" perturbed (by shift and erosion/dilation) to hit a
chosen IoU with its ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from ..egoflow import (
    DEPTH_SCALE,
    CameraIntrinsics,
    DepthMap,
    FlowField,
    PoseSE3,
    compute_ego_flow,
    rotation_from_axis_angle,
    write_depth,
    write_flow,
)
from ..labels import Category, CategoryTable, LabelMap, join_id, write_label_png
from ..openset import EmbeddingMap
from ..prototypes import write_tensor
from .manifest import Frame, Manifest, OpenSetSpec, save_manifest

ROAD, SKY, PERSON, CAR, UNKNOWN = 7, 23, 24, 26, 40
CATEGORIES = CategoryTable([
    Category(ROAD, "road", False),
    Category(SKY, "sky", False),
    Category(PERSON, "person", True),
    Category(CAR, "car", True),
    Category(UNKNOWN, "unknown object", True),
])
CLASS_NAMES = {UNKNOWN: "traffic cone"}
IOU_TOLERANCE = 0.02
EMBED_DIM = 4
# fixed class centres for the synthetic pixel embeddings
_EMBED_CENTRES = {
    ROAD: (0.0, -2.0, 0.0, 0.0),
    SKY: (0.0, 2.0, 0.0, 0.0),
    PERSON: (-2.0, 0.0, 1.0, 0.0),
    CAR: (2.0, 0.0, 1.0, 0.0),
    UNKNOWN: (0.0, 0.0, -2.0, 1.0),
}


@dataclass(frozen=True)
class ObjectSpec:
    """One object. ``target_iou=None`` leaves it unpredicted (a miss)."""

    top: int
    left: int
    height: int
    width: int
    category: int = CAR
    shape: str = "rect"
    motion: Tuple[float, float] = (0.0, 0.0)
    depth: float = 8.0
    target_iou: Optional[float] = 1.0

    @property
    def moving(self) -> bool:
        return self.motion != (0.0, 0.0)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 96
    objects: Optional[Tuple[ObjectSpec, ...]] = None  # explicit layout, else random
    n_objects: Tuple[int, int] = (2, 6)
    size_range: Tuple[int, int] = (8, 20)
    categories: Tuple[int, ...] = (PERSON, CAR, UNKNOWN)
    moving_prob: float = 0.5
    max_motion: float = 4.0
    iou_range: Tuple[float, float] = (0.55, 1.0)
    miss_prob: float = 0.1
    ego_motion: bool = True
    embeddings: bool = True


@dataclass
class SynthScene:
    seed: int
    spec: SceneSpec
    objects: List[ObjectSpec]
    intrinsics: CameraIntrinsics
    pose: PoseSE3
    depth: DepthMap
    flow: FlowField
    panoptic_gt: LabelMap
    panoptic_pred: LabelMap
    ca_gt: LabelMap
    ca_pred: LabelMap
    semantic_gt: np.ndarray
    semantic_pred: np.ndarray
    achieved_iou: List[Optional[float]]
    motion: Dict[int, bool]
    embeddings: Optional[np.ndarray] = None


def object_mask(o: ObjectSpec, shape: Tuple[int, int]) -> np.ndarray:
    m = np.zeros(shape, bool)
    if o.shape == "rect":
        m[o.top:o.top + o.height, o.left:o.left + o.width] = True
    elif o.shape == "ellipse":
        v, u = np.mgrid[0:o.height, 0:o.width]
        cy, cx = (o.height - 1) / 2, (o.width - 1) / 2
        inside = ((v - cy) / (o.height / 2)) ** 2 + ((u - cx) / (o.width / 2)) ** 2 <= 1.0
        m[o.top:o.top + o.height, o.left:o.left + o.width] = inside
    else:
        raise ValueError(f"unknown shape {o.shape!r}")
    return m


_KERNELS = (np.ones((3, 3), np.uint8), np.ones((1, 3), np.uint8), np.ones((3, 1), np.uint8))


def _morph(mask: np.ndarray, kind: int, k: int) -> np.ndarray:
    """Dilate (``k > 0``) or erode (``k < 0``) with a square, row or column kernel."""
    if k == 0:
        return mask
    op = cv2.dilate if k > 0 else cv2.erode
    return op(mask.astype(np.uint8), _KERNELS[kind], iterations=abs(k)).astype(bool)


def perturbation_candidates(gt: np.ndarray, target: float, max_morph: int = 3,
                            tolerance: Optional[float] = IOU_TOLERANCE):
    """Every (shift, erosion/dilation) perturbation of ``gt`` within ``tolerance``.

    Yields ``(error, mask)`` in order of increasing ``|IoU - target|``, then
    preferring smaller perturbations. Only masks that fit the canvas are
    yielded.
    """
    h, w = gt.shape
    rows, cols = np.nonzero(gt)
    if rows.size == 0:
        raise ValueError("cannot perturb an empty mask")
    t0, l0 = rows.min(), cols.min()
    bh, bw = rows.max() - t0 + 1, cols.max() - l0 + 1
    pad = max(bh, bw) + max_morph + 1
    win = np.zeros((bh + 2 * pad, bw + 2 * pad), bool)
    win[pad:pad + bh, pad:pad + bw] = gt[t0:t0 + bh, l0:l0 + bw]
    winf = win.astype(np.float32)
    area = int(win.sum())
    ops = [(0, 0)] + [(kind, k) for k in range(-max_morph, max_morph + 1) if k
                      for kind in range(len(_KERNELS))]
    templates, parts = [], []
    for op_index, (kind, k) in enumerate(ops):
        mk = _morph(win, kind, k)
        if not mk.any():
            continue
        r, c = np.nonzero(mk)
        tt, tl = r.min(), c.min()
        templ = mk[tt:r.max() + 1, tl:c.max() + 1]
        th, tw = templ.shape
        inter = np.rint(cv2.matchTemplate(winf, templ.astype(np.float32), cv2.TM_CCORR))
        ious = inter / (area + int(templ.sum()) - inter)
        err = np.abs(ious - target)
        ok = err <= tolerance if tolerance is not None else ious > 0
        ys, xs = np.nonzero(ok)
        # canvas position of the template's top-left corner
        top = t0 - pad + ys
        left = l0 - pad + xs
        fits = (top >= 0) & (left >= 0) & (top + th <= h) & (left + tw <= w)
        ys, xs, top, left = ys[fits], xs[fits], top[fits], left[fits]
        dy, dx = ys - tt, xs - tl
        n = ys.size
        parts.append(np.stack([
            err[ys, xs], np.full(n, abs(k)), np.abs(dy) + np.abs(dx), dy, dx,
            np.full(n, op_index), top, left, np.full(n, len(templates)),
        ], axis=1))
        templates.append(templ)
    if not parts:
        return
    cand = np.concatenate(parts)
    order = np.lexsort(cand[:, 5::-1].T)
    for e, *_, top, left, ti in cand[order]:
        templ = templates[int(ti)]
        m = np.zeros_like(gt)
        m[int(top):int(top) + templ.shape[0], int(left):int(left) + templ.shape[1]] = templ
        yield float(e), m


def perturb_mask(gt: np.ndarray, target: float, forbidden: Optional[np.ndarray] = None,
                 strict: bool = True) -> np.ndarray:
    """Closest perturbation of ``gt`` to IoU ``target`` avoiding ``forbidden`` pixels.

    With ``strict`` the result must land within the tolerance; otherwise the
    nearest reachable IoU is accepted.
    """
    tol = IOU_TOLERANCE if strict else None
    for _, m in perturbation_candidates(gt, target, tolerance=tol):
        if forbidden is None or not (m & forbidden).any():
            return m
    raise ValueError(
        f"target IoU {target} is unreachable within +-{IOU_TOLERANCE} "
        f"for an object of {int(gt.sum())} pixels"
    )


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.count_nonzero(a & b) / np.count_nonzero(a | b))


def _random_objects(rng: np.random.Generator, spec: SceneSpec) -> List[ObjectSpec]:
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    occupied = np.zeros((spec.height, spec.width), bool)
    out = []
    lo, hi = spec.size_range
    for _ in range(n):
        for _attempt in range(50):
            oh, ow = (int(s) for s in rng.integers(lo, hi + 1, 2))
            if oh + 2 > spec.height or ow + 2 > spec.width:
                continue
            top = int(rng.integers(1, spec.height - oh))
            left = int(rng.integers(1, spec.width - ow))
            if occupied[top - 1:top + oh + 1, left - 1:left + ow + 1].any():
                continue
            occupied[top:top + oh, left:left + ow] = True
            moving = rng.random() < spec.moving_prob
            motion = (0.0, 0.0)
            if moving:
                ang = rng.uniform(0, 2 * np.pi)
                mag = rng.uniform(0.5, spec.max_motion)
                motion = (float(mag * np.cos(ang)), float(mag * np.sin(ang)))
            target = None if rng.random() < spec.miss_prob else float(rng.uniform(*spec.iou_range))
            out.append(ObjectSpec(
                top, left, oh, ow,
                category=int(rng.choice(spec.categories)),
                shape="rect" if rng.random() < 0.5 else "ellipse",
                motion=motion,
                depth=float(rng.uniform(5.0, 15.0)),
                target_iou=target,
            ))
            break
    return out


def _camera(rng, spec: SceneSpec):
    f = float(spec.width)
    k = CameraIntrinsics(f, f, (spec.width - 1) / 2, (spec.height - 1) / 2)
    if not spec.ego_motion:
        return k, PoseSE3.identity()
    r = rotation_from_axis_angle(rng.uniform(-0.01, 0.01, 3))
    t = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.05, 0.05), rng.uniform(0.2, 1.0)])
    return k, PoseSE3(r, t)


def _background_depth(rng, spec: SceneSpec, k: CameraIntrinsics) -> np.ndarray:
    tilt = rng.uniform(0.0, 0.3)
    n = np.array([0.0, np.sin(tilt), np.cos(tilt)])
    dist = rng.uniform(20.0, 40.0)
    v, u = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    ray = n[0] * (u - k.cx) / k.fx + n[1] * (v - k.cy) / k.fy + n[2]
    return dist / ray


def generate_scene(seed: int, spec: Optional[SceneSpec] = None) -> SynthScene:
    """Build one scene; the same ``(seed, spec)`` always gives the same arrays."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    shape = (spec.height, spec.width)
    objects = list(spec.objects) if spec.objects is not None else _random_objects(rng, spec)
    k, pose = _camera(rng, spec)

    masks = []
    taken = np.zeros(shape, bool)
    for i, o in enumerate(objects):
        if o.top < 0 or o.left < 0 or o.top + o.height > spec.height or o.left + o.width > spec.width:
            raise ValueError(f"object {i} lies outside the {spec.height}x{spec.width} canvas")
        if o.category not in CATEGORIES or not CATEGORIES[o.category].isthing:
            raise ValueError(f"object {i}: category {o.category} is not a thing category")
        m = object_mask(o, shape)
        if (m & taken).any():
            raise ValueError(f"object {i} overlaps an earlier object")
        taken |= m
        masks.append(m)

    horizon = int(round(0.4 * spec.height))
    stuff = np.full(shape, ROAD, np.int64)
    stuff[:horizon] = SKY

    # depth is quantised to the PNG grid so stored depth reproduces the flow exactly
    z = _background_depth(rng, spec, k)
    for o, m in zip(objects, masks):
        z[m] = o.depth
    z = np.rint(z * DEPTH_SCALE) / DEPTH_SCALE
    depth = DepthMap(z)
    ego = compute_ego_flow(depth, k, pose)
    fu, fv = ego.u.copy(), ego.v.copy()
    for o, m in zip(objects, masks):
        fu[m] += o.motion[0]
        fv[m] += o.motion[1]
    flow = FlowField(fu, fv, ego.valid)

    pan_gt = stuff * 1000
    pan_pred = stuff * 1000
    ca_gt = np.zeros(shape, np.uint32)
    ca_pred = np.zeros(shape, np.uint32)
    sem_gt = stuff.copy()
    sem_pred = stuff.copy()
    painted = np.zeros(shape, bool)
    counters: Dict[int, int] = {}
    achieved: List[Optional[float]] = []
    motion: Dict[int, bool] = {}
    n_moving = 0
    for o, m in zip(objects, masks):
        counters[o.category] = counters.get(o.category, 0) + 1
        pid = join_id(o.category, counters[o.category])
        motion[pid] = o.moving
        pan_gt[m] = pid
        sem_gt[m] = o.category
        if o.moving:
            n_moving += 1
            ca_gt[m] = n_moving
        if o.target_iou is None:
            achieved.append(None)
            continue
        pm = perturb_mask(m, o.target_iou, painted, strict=spec.objects is not None)
        painted |= pm
        achieved.append(_mask_iou(pm, m))
        pan_pred[pm] = pid
        sem_pred[pm] = o.category
        if o.moving:
            ca_pred[pm] = n_moving

    emb = None
    if spec.embeddings:
        centres = np.array([_EMBED_CENTRES[c] for c in sorted(_EMBED_CENTRES)])
        lookup = {c: i for i, c in enumerate(sorted(_EMBED_CENTRES))}
        idx = np.vectorize(lookup.__getitem__)(sem_gt)
        emb = (centres[idx] + rng.normal(0.0, 0.3, shape + (EMBED_DIM,))).astype(np.float32)

    return SynthScene(
        seed, spec, objects, k, pose, depth, flow,
        LabelMap(pan_gt.astype(np.uint32), True), LabelMap(pan_pred.astype(np.uint32), True),
        LabelMap(ca_gt), LabelMap(ca_pred),
        sem_gt, sem_pred, achieved, motion, emb,
    )


def write_scene(scene: SynthScene, root, frame_id: str, split: str = "test") -> Frame:
    """Write every artifact of ``scene`` below ``root`` and return its frame record."""
    root = Path(root)
    d = root / frame_id
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "panoptic_gt": d / "panoptic_gt.png",
        "panoptic_pred": d / "panoptic_pred.png",
        "ca_gt": d / "ca_gt.png",
        "ca_pred": d / "ca_pred.png",
        "semantic_gt": d / "semantic_gt.png",
        "semantic_pred": d / "semantic_pred.png",
        "flow": d / "flow.png",
        "depth": d / "depth.png",
    }
    write_label_png(paths["panoptic_gt"], scene.panoptic_gt)
    write_label_png(paths["panoptic_pred"], scene.panoptic_pred)
    write_label_png(paths["ca_gt"], scene.ca_gt)
    write_label_png(paths["ca_pred"], scene.ca_pred)
    write_label_png(paths["semantic_gt"], LabelMap(scene.semantic_gt.astype(np.uint32)))
    write_label_png(paths["semantic_pred"], LabelMap(scene.semantic_pred.astype(np.uint32)))
    write_flow(paths["flow"], scene.flow)
    write_depth(paths["depth"], scene.depth)
    if scene.embeddings is not None:
        paths["embeddings"] = d / "embeddings.vct"
        write_tensor(paths["embeddings"], scene.embeddings)
        paths["features"] = paths["embeddings"]
        paths["class_mask"] = paths["semantic_gt"]
    return Frame(frame_id, split, paths, scene.intrinsics, scene.pose, dict(scene.motion))


def frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_dataset(out, seed: int, frames: int, spec: Optional[SceneSpec] = None,
                  train_fraction: float = 0.5) -> Manifest:
    """Write ``frames`` scenes plus ``manifest.json`` into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_train = int(round(frames * train_fraction))
    recs = []
    for i in range(frames):
        scene = generate_scene(frame_seed(seed, i), spec)
        recs.append(write_scene(scene, out, f"frame_{i:05d}", "train" if i < n_train else "test"))
    known = [ROAD, SKY, PERSON, CAR]
    m = Manifest(recs, CATEGORIES, dict(CLASS_NAMES), OpenSetSpec(known, UNKNOWN), out)
    save_manifest(m, out / "manifest.json")
    (out / "synth.json").write_text(json.dumps({"seed": seed, "frames": frames}) + "\n")
    return m


def gaussian_toy(n: int = 2000, seed: int = 0, std: float = 0.7) -> EmbeddingMap:
    """Three known 2-D Gaussian clusters (labels 0-2) and an unknown one (label 3)."""
    rng = np.random.default_rng(seed)
    centres = np.array([[-4.0, 0.0], [4.0, 0.0], [0.0, 4.0], [0.0, -5.0]])
    y = rng.integers(0, 4, n)
    return EmbeddingMap(centres[y] + rng.normal(0.0, std, (n, 2)), y)


def known_only(b: EmbeddingMap, num_known: int) -> EmbeddingMap:
    keep = b.labels < num_known
    return EmbeddingMap(b.embeddings[keep], b.labels[keep])
