"""Batch evaluation over a manifest.

Frames are scored independently (optionally on a thread pool) and their
partial sums are reduced in manifest order, so a report does not depend on
the number of workers. Per-frame records keep the raw partials, which lets
anyone recompute the aggregate from the frame list alone.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..egoflow import FlowField, compute_ego_flow, read_depth, read_flow, suppress_ego_flow, write_flow
from ..labels import OFFSET, read_label_png
from ..metrics import (
    BinaryIoUAccumulator,
    CAAccumulator,
    ClassStat,
    ConfusionAccumulator,
    PanopticAccumulator,
    match_instances,
)
from ..openset import EmbeddingMap, OpenSetParams, load_checkpoint, predict_labels
from ..prototypes import read_tensor
from .manifest import SPLITS, Frame, Manifest

TRACKS = ("ca", "panoptic", "openset")
WORKERS_ENV = "VCAS_WORKERS"


@dataclass(frozen=True)
class EvalOptions:
    efs: bool = False
    invert_pose: bool = False
    motion_threshold: float = 1.0  # px of residual flow that counts as motion
    split: Optional[str] = None
    checkpoint: Optional[str] = None


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers < 1:
        raise ValueError(f"worker count must be at least 1, got {workers}")
    return workers


# -- flow ----------------------------------------------------------------------


def frame_flow(frame: Frame, efs: bool, invert_pose: bool = False) -> FlowField:
    """Observed flow of a frame, ego-suppressed when ``efs`` is set."""
    flow = read_flow(frame.path("flow"))
    if not efs:
        return flow
    if frame.intrinsics is None or frame.pose is None or "depth" not in frame.paths:
        raise ValueError("ego-flow suppression needs depth, intrinsics and pose")
    depth = read_depth(frame.path("depth"))
    return suppress_ego_flow(flow, compute_ego_flow(depth, frame.intrinsics, frame.pose, invert_pose))


def _flow_diagnostics(frame: Frame, opts: EvalOptions) -> Optional[dict]:
    if "flow" not in frame.paths:
        if opts.efs:
            raise ValueError("ego-flow suppression needs a flow entry")
        return None
    flow = frame_flow(frame, opts.efs, opts.invert_pose)
    norm = flow.norm()
    instances = []
    moving_gt = np.zeros(flow.shape, bool)
    if "panoptic_gt" in frame.paths:
        gt = read_label_png(frame.path("panoptic_gt"), True)
        motion = frame.motion or {}
        for sid in np.unique(gt.ids):
            sid = int(sid)
            if sid == 0 or sid % OFFSET == 0:
                continue
            m = gt.ids == sid
            moving = motion.get(sid)
            if moving:
                moving_gt |= m
            sel = m & flow.valid
            res = float(norm[sel].mean()) if sel.any() else float("nan")
            instances.append({"id": sid, "moving": moving, "residual": res})
    elif "ca_gt" in frame.paths:
        moving_gt = read_label_png(frame.path("ca_gt"), False).ids > 0
    acc = BinaryIoUAccumulator().add(norm > opts.motion_threshold, moving_gt, flow.valid)
    return {"instances": instances, "motion_inter": acc.intersection, "motion_union": acc.union}


# -- per-frame scoring -------------------------------------------------------------


def _frame_ca(frame: Frame, m: Manifest, opts: EvalOptions) -> dict:
    gt = read_label_png(frame.path("ca_gt"), False)
    pred = read_label_png(frame.path("ca_pred"), False)
    void = None
    if "ca_void" in frame.paths:
        void = read_label_png(frame.path("ca_void"), False).ids > 0
    r = match_instances(pred, gt, class_aware=False, void=void)
    rec = {"TP": len(r.tp), "FP": len(r.fp), "FN": len(r.fn), "iou_sum": r.iou_sum}
    rep = CAAccumulator(rec["TP"], rec["FP"], rec["FN"], rec["iou_sum"]).finalize()
    rec.update({"SQ": rep.sq, "RQ": rep.rq, "CAQ": rep.caq})
    flow = _flow_diagnostics(frame, opts)
    if flow is not None:
        rec["flow"] = flow
    return rec


def _frame_panoptic(frame: Frame, m: Manifest, opts: EvalOptions) -> dict:
    gt = read_label_png(frame.path("panoptic_gt"), True)
    pred = read_label_png(frame.path("panoptic_pred"), True)
    r = match_instances(pred, gt, class_aware=True)
    acc = PanopticAccumulator().add(r)
    rep = acc.finalize(m.categories)
    per_class = {
        str(k): {"TP": s.tp, "FP": s.fp, "FN": s.fn, "iou_sum": s.iou_sum}
        for k, s in sorted(acc.stats.items())
    }
    return {"PQ_All": rep.pq_all, "PQ_Th": rep.pq_th, "PQ_St": rep.pq_st, "classes": per_class}


def _openset_maps(frame: Frame, m: Manifest, params: Optional[OpenSetParams]):
    spec = m.openset
    gt = read_label_png(frame.path("semantic_gt"), False).ids.astype(np.int64)
    if params is None:
        pred = read_label_png(frame.path("semantic_pred"), False).ids.astype(np.int64)
    else:
        emb = read_tensor(frame.path("embeddings"))
        labels = predict_labels(EmbeddingMap(emb, np.zeros(emb.shape[:-1], np.int64)), params)
        lut = np.array(list(spec.known) + [spec.unknown_id], np.int64)
        pred = lut[labels]
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: pred {pred.shape} vs gt {gt.shape}")
    return gt, pred


def _frame_openset(frame: Frame, m: Manifest, opts: EvalOptions, params=None) -> dict:
    spec = m.openset
    if spec is None:
        raise ValueError("manifest has no openset section")
    gt, pred = _openset_maps(frame, m, params)
    valid = np.ones(gt.shape, bool) if spec.ignore_id is None else gt != spec.ignore_id
    index = {c: i for i, c in enumerate(spec.known)}

    def to_index(a):
        out = np.full(a.shape, -1, np.int64)
        for c, i in index.items():
            out[a == c] = i
        return out

    conf = ConfusionAccumulator(len(spec.known)).add(to_index(pred), to_index(gt), valid)
    unk = BinaryIoUAccumulator().add(pred == spec.unknown_id, gt == spec.unknown_id, valid)
    miou = conf.miou()
    ca_iou = unk.value
    return {
        "mIoU": miou, "CA-IoU": ca_iou,
        "confusion": conf.matrix.tolist(),
        "unknown_inter": unk.intersection, "unknown_union": unk.union,
    }


_SCORERS: Dict[str, Callable] = {"ca": _frame_ca, "panoptic": _frame_panoptic, "openset": _frame_openset}


# -- reduction -------------------------------------------------------------------


def _known(x) -> bool:
    # residuals are NaN in memory and null after a JSON round trip
    return x is not None and not math.isnan(x)


def _reduce_ca(recs: List[dict]) -> dict:
    acc = CAAccumulator()
    flow_recs = [r["flow"] for r in recs if "flow" in r]
    for r in recs:
        acc.merge(CAAccumulator(r["TP"], r["FP"], r["FN"], r["iou_sum"]))
    out = acc.finalize().as_dict()
    if flow_recs:
        inter = sum(f["motion_inter"] for f in flow_recs)
        union = sum(f["motion_union"] for f in flow_recs)
        static = [i["residual"] for f in flow_recs for i in f["instances"]
                  if i["moving"] is False and _known(i["residual"])]
        moving = [i["residual"] for f in flow_recs for i in f["instances"]
                  if i["moving"] and _known(i["residual"])]
        out["motion_IoU"] = inter / union if union else 1.0
        out["residual_static"] = math.fsum(static) / len(static) if static else float("nan")
        out["residual_static_max"] = max(static) if static else float("nan")
        out["residual_moving"] = math.fsum(moving) / len(moving) if moving else float("nan")
    return out


def _reduce_panoptic(recs: List[dict], m: Manifest) -> dict:
    acc = PanopticAccumulator()
    for r in recs:
        part = PanopticAccumulator({int(k): ClassStat(v["TP"], v["FP"], v["FN"], v["iou_sum"])
                                    for k, v in r["classes"].items()})
        acc.merge(part)
    if not acc.stats:
        return {"PQ_All": float("nan"), "PQ_Th": float("nan"), "PQ_St": float("nan")}
    return acc.finalize(m.categories).as_dict()


def _reduce_openset(recs: List[dict], m: Manifest) -> dict:
    k = len(m.openset.known) if m.openset else 0
    conf = ConfusionAccumulator(k)
    unk = BinaryIoUAccumulator()
    for r in recs:
        conf.merge(ConfusionAccumulator(k, np.array(r["confusion"], np.int64)))
        unk.merge(BinaryIoUAccumulator(r["unknown_inter"], r["unknown_union"]))
    ious = conf.ious()
    return {
        "mIoU": conf.miou(), "CA-IoU": unk.value,
        "per_class_IoU": {str(c): float(v) for c, v in zip(m.openset.known if m.openset else [], ious)},
    }


def reduce_frames(track: str, records: List[dict], m: Manifest) -> dict:
    """Aggregate per-frame records (in order) into the report's ``aggregate`` block."""
    ok = [r for r in records if r["status"] == "ok"]
    groups = [("all", ok)] + [(s, [r for r in ok if r["split"] == s]) for s in SPLITS]
    out = {}
    for name, recs in groups:
        if name != "all" and not recs:
            continue
        if track == "ca":
            agg = _reduce_ca(recs)
        elif track == "panoptic":
            agg = _reduce_panoptic(recs, m)
        else:
            agg = _reduce_openset(recs, m)
        out[name] = {"frames": len(recs), **agg}
    return out


# -- driver ------------------------------------------------------------------------


def _score_frame(track: str, frame: Frame, m: Manifest, opts: EvalOptions, params) -> dict:
    head = {"id": frame.id, "split": frame.split}
    try:
        if track == "openset":
            body = _frame_openset(frame, m, opts, params)
        else:
            body = _SCORERS[track](frame, m, opts)
        return {**head, "status": "ok", **body}
    except Exception as e:  # noqa: BLE001 - every failure is reported per frame
        return {**head, "status": "error", "error": f"{type(e).__name__}: {e}"}


def evaluate_dataset(m: Manifest, track: str, options: Optional[EvalOptions] = None,
                     workers: Optional[int] = None) -> dict:
    """Score every frame of ``m`` on ``track`` and aggregate.

    Failing frames are kept in the report with their error message and left
    out of the aggregate.
    """
    if track not in TRACKS:
        raise ValueError(f"unknown track {track!r}; choose from {TRACKS}")
    opts = options or EvalOptions()
    if opts.split is not None and opts.split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    m = m.select(opts.split)
    params = load_checkpoint(opts.checkpoint) if opts.checkpoint else None
    n = resolve_workers(workers)
    if n == 1:
        records = [_score_frame(track, f, m, opts, params) for f in m.frames]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            records = list(pool.map(lambda f: _score_frame(track, f, m, opts, params), m.frames))
    failed = sum(r["status"] != "ok" for r in records)
    return {
        "track": track,
        "options": asdict(opts),
        "frames_total": len(records),
        "frames_failed": failed,
        "aggregate": reduce_frames(track, records, m),
        "frames": records,
    }


# -- output ------------------------------------------------------------------------


def _clean(x):
    if isinstance(x, float):
        return None if math.isnan(x) or math.isinf(x) else x
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def report_to_json(report: dict) -> str:
    """Full-precision JSON; NaN becomes ``null``."""
    return json.dumps(_clean(report), indent=2, allow_nan=False) + "\n"


CSV_COLUMNS = {
    "ca": ["SQ", "RQ", "CAQ"],
    "panoptic": ["PQ_All", "PQ_Th", "PQ_St"],
    "openset": ["mIoU", "CA-IoU"],
}


def _pct(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100.0 * v:.1f}"


def report_to_csv(report: dict) -> str:
    """One row per split plus ``all``; scores in percent with one decimal."""
    track = report["track"]
    cols = CSV_COLUMNS[track]
    agg = report["aggregate"]
    flow = track == "ca" and "motion_IoU" in agg.get("all", {})
    header = ["Split", "Frames"] + (["EFS"] if track == "ca" else []) + cols
    if flow:
        header += ["Motion-IoU", "Residual-static", "Residual-moving"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for name, row in agg.items():
        line = [name, row["frames"]]
        if track == "ca":
            line.append("yes" if report["options"]["efs"] else "no")
        line += [_pct(row.get(c)) for c in cols]
        if flow:
            line.append(_pct(row.get("motion_IoU")))
            for key in ("residual_static", "residual_moving"):
                v = row.get(key)
                line.append("" if v is None or math.isnan(v) else f"{v:.1f}")
        w.writerow(line)
    return buf.getvalue()


def suppress_dataset(m: Manifest, out_dir, invert_pose: bool = False) -> List[Tuple[str, Optional[str]]]:
    """Write the ego-suppressed flow of each frame as ``<out>/<frame id>.png``.

    Returns ``(frame id, error or None)`` per frame.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for f in m.frames:
        try:
            write_flow(out / f"{f.id}.png", frame_flow(f, True, invert_pose))
            results.append((f.id, None))
        except Exception as e:  # noqa: BLE001
            results.append((f.id, f"{type(e).__name__}: {e}"))
    return results


def recompute_aggregate(report: dict, m: Manifest) -> dict:
    """Aggregate rebuilt from the report's own frame records."""
    return reduce_frames(report["track"], report["frames"], m.select(report["options"]["split"]))
