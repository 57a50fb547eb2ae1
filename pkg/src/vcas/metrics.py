"""Instance matching and the class-agnostic / panoptic / open-set metrics.

Matching uses the unambiguous rule of panoptic evaluation: a prediction and a
ground-truth segment form a true positive iff their IoU is strictly above 0.5,
which guarantees each segment takes part in at most one pair.

The class-agnostic recognition quality is ``|TP| / (|TP| + |FN|)``; it has no
false-positive term. False positives are still counted and reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .labels import VOID_ID, CategoryTable, LabelMap, overlap_counts, split_id

MATCH_THRESHOLD = 0.5
VOID_FRACTION = 0.5


@dataclass
class MatchResult:
    tp: List[Tuple[int, int, float]] = field(default_factory=list)
    fp: List[int] = field(default_factory=list)
    fn: List[int] = field(default_factory=list)
    # predictions dropped because more than half of them lies on void
    ignored: List[int] = field(default_factory=list)
    categorized: bool = False

    @property
    def iou_sum(self) -> float:
        return math.fsum(t[2] for t in self.tp)


def _pred_void_overlap(pred: LabelMap, p_ids: np.ndarray, void: Optional[np.ndarray]) -> np.ndarray:
    out = np.zeros(p_ids.size, np.int64)
    if void is None:
        return out
    vals, counts = np.unique(pred.ids[void], return_counts=True)
    pos = np.searchsorted(p_ids, vals)
    out[pos] = counts
    return out


def match_instances(
    pred: LabelMap,
    gt: LabelMap,
    class_aware: bool = False,
    void: Optional[np.ndarray] = None,
) -> MatchResult:
    """Match predicted segments to ground-truth segments.

    Parameters
    ----------
    pred, gt : LabelMap
        Maps of equal shape. With ``class_aware`` both must be categorized and
        only same-category pairs can match.
    class_aware : bool
        Panoptic matching. Ground-truth id 0 is then treated as void.
    void : bool array, optional
        Explicit void region of the ground truth. Defaults to ``gt == 0`` for
        class-aware matching and to no void at all for class-agnostic matching,
        where id 0 is ordinary background.

    Void pixels are removed from each pair's union, and a prediction lying
    more than half on void is dropped instead of being counted as a false
    positive.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: pred {pred.shape} vs gt {gt.shape}")
    if class_aware and not (pred.categorized and gt.categorized):
        raise ValueError("class-aware matching needs categorized label maps")
    if void is None and class_aware:
        void = gt.ids == VOID_ID
    elif void is not None:
        void = np.asarray(void, bool)
        if void.shape != gt.shape:
            raise ValueError("void mask shape differs from label map")

    p_ids, g_ids, counts = overlap_counts(pred, gt)
    p_area = counts.sum(axis=1)
    g_area = counts.sum(axis=0)
    p_void = _pred_void_overlap(pred, p_ids, void)

    p_valid = p_ids != VOID_ID
    g_valid = g_ids != VOID_ID
    inter = counts.astype(np.float64)
    union = p_area[:, None] + g_area[None, :] - counts - p_void[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ious = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    cand = (ious > MATCH_THRESHOLD) & p_valid[:, None] & g_valid[None, :]
    if class_aware:
        p_cat = p_ids // 1000
        g_cat = g_ids // 1000
        cand &= p_cat[:, None] == g_cat[None, :]

    result = MatchResult(categorized=class_aware)
    rows, cols = np.nonzero(cand)
    p_matched = np.zeros(p_ids.size, bool)
    g_matched = np.zeros(g_ids.size, bool)
    order = np.argsort(g_ids[cols], kind="stable")
    for r, c in zip(rows[order], cols[order]):
        result.tp.append((int(p_ids[r]), int(g_ids[c]), float(ious[r, c])))
        p_matched[r] = True
        g_matched[c] = True

    for r in np.flatnonzero(p_valid & ~p_matched):
        if p_void[r] > VOID_FRACTION * p_area[r]:
            result.ignored.append(int(p_ids[r]))
        else:
            result.fp.append(int(p_ids[r]))
    result.fn = [int(g) for g in g_ids[g_valid & ~g_matched]]
    return result


# -- class-agnostic quality ---------------------------------------------------


@dataclass(frozen=True)
class CAReport:
    sq: float
    rq: float
    caq: float
    tp: int
    fp: int
    fn: int

    @property
    def counts(self) -> Tuple[int, int, int]:
        return self.tp, self.fp, self.fn

    def as_dict(self) -> dict:
        return {"SQ": self.sq, "RQ": self.rq, "CAQ": self.caq, "TP": self.tp, "FP": self.fp, "FN": self.fn}


def combine_quality(sq: float, rq: float) -> float:
    """CAQ from segmentation and recognition quality."""
    return sq * rq


@dataclass
class CAAccumulator:
    """Integer counts and IoU sum, merged in a fixed order across frames."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def add(self, m: MatchResult) -> "CAAccumulator":
        self.tp += len(m.tp)
        self.fp += len(m.fp)
        self.fn += len(m.fn)
        self.iou_sum += m.iou_sum
        return self

    def merge(self, other: "CAAccumulator") -> "CAAccumulator":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        return self

    def finalize(self) -> CAReport:
        sq = self.iou_sum / self.tp if self.tp else 0.0
        denom = self.tp + self.fn
        rq = self.tp / denom if denom else 0.0
        return CAReport(sq, rq, combine_quality(sq, rq), self.tp, self.fp, self.fn)


def compute_caq(m: Union[MatchResult, Iterable[MatchResult]]) -> CAReport:
    """SQ, RQ and CAQ for one match result or a sequence of them."""
    acc = CAAccumulator()
    for r in [m] if isinstance(m, MatchResult) else m:
        acc.add(r)
    return acc.finalize()


# -- panoptic quality ---------------------------------------------------------


@dataclass
class ClassStat:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def merge(self, other: "ClassStat") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum

    @property
    def empty(self) -> bool:
        return self.tp + self.fp + self.fn == 0

    def scores(self) -> Tuple[float, float, float]:
        """Per-class ``(pq, sq, rq)`` with the standard panoptic RQ."""
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 0.0, 0.0, 0.0
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return self.iou_sum / denom, sq, rq


@dataclass(frozen=True)
class PanopticReport:
    per_class: Dict[int, dict]
    pq_all: float
    pq_th: float
    pq_st: float
    n_all: int
    n_th: int
    n_st: int

    def as_dict(self) -> dict:
        return {
            "PQ_All": self.pq_all,
            "PQ_Th": self.pq_th,
            "PQ_St": self.pq_st,
            "n_classes": {"All": self.n_all, "Th": self.n_th, "St": self.n_st},
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else float("nan")


@dataclass
class PanopticAccumulator:
    stats: Dict[int, ClassStat] = field(default_factory=dict)

    def _stat(self, category: int) -> ClassStat:
        return self.stats.setdefault(category, ClassStat())

    def add(self, m: MatchResult) -> "PanopticAccumulator":
        if not m.categorized:
            raise ValueError("panoptic quality needs a class-aware match")
        for p, g, v in m.tp:
            s = self._stat(split_id(g)[0])
            s.tp += 1
            s.iou_sum += v
        for p in m.fp:
            self._stat(split_id(p)[0]).fp += 1
        for g in m.fn:
            self._stat(split_id(g)[0]).fn += 1
        return self

    def merge(self, other: "PanopticAccumulator") -> "PanopticAccumulator":
        for k in sorted(other.stats):
            self._stat(k).merge(other.stats[k])
        return self

    def finalize(self, cats: CategoryTable) -> PanopticReport:
        if len(cats) == 0:
            raise ValueError("category table is empty")
        unknown = sorted(set(self.stats) - {c.id for c in cats.entries})
        if unknown:
            raise ValueError(f"categories {unknown} are not in the category table")
        per_class = {}
        th, st = [], []
        for c in cats.entries:
            s = self.stats.get(c.id, ClassStat())
            if s.empty:
                continue
            pq, sq, rq = s.scores()
            per_class[c.id] = {
                "name": c.name, "isthing": c.isthing, "PQ": pq, "SQ": sq, "RQ": rq,
                "TP": s.tp, "FP": s.fp, "FN": s.fn,
            }
            (th if c.isthing else st).append(pq)
        return PanopticReport(
            per_class, _mean(th + st), _mean(th), _mean(st), len(th) + len(st), len(th), len(st)
        )


def compute_pq(m: Union[MatchResult, Iterable[MatchResult]], cats: CategoryTable) -> PanopticReport:
    """Panoptic quality per class and its All / Th / St means.

    Classes absent from both prediction and ground truth are skipped. A mean
    over an empty group is NaN.
    """
    acc = PanopticAccumulator()
    for r in [m] if isinstance(m, MatchResult) else m:
        acc.add(r)
    return acc.finalize(cats)


# -- open-set ------------------------------------------------------------------


def compute_ca_iou(pred_unknown: np.ndarray, gt_unknown: np.ndarray) -> float:
    """Binary IoU between predicted and ground-truth unknown-object pixels.

    Both masks empty gives 1.0.
    """
    acc = BinaryIoUAccumulator()
    acc.add(pred_unknown, gt_unknown)
    return acc.value


@dataclass
class BinaryIoUAccumulator:
    intersection: int = 0
    union: int = 0

    def add(self, pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None):
        pred = np.asarray(pred, bool)
        gt = np.asarray(gt, bool)
        if pred.shape != gt.shape:
            raise ValueError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
        if valid is not None:
            pred = pred & valid
            gt = gt & valid
        self.intersection += int(np.count_nonzero(pred & gt))
        self.union += int(np.count_nonzero(pred | gt))
        return self

    def merge(self, other: "BinaryIoUAccumulator"):
        self.intersection += other.intersection
        self.union += other.union
        return self

    @property
    def value(self) -> float:
        return self.intersection / self.union if self.union else 1.0


@dataclass
class ConfusionAccumulator:
    """Semantic confusion counts over ``num_classes`` labels for mIoU.

    Predictions outside ``[0, num_classes)`` land in an extra column so they
    still count against the ground-truth class.
    """

    num_classes: int
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.matrix is None:
            self.matrix = np.zeros((self.num_classes, self.num_classes + 1), np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None):
        k = self.num_classes
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        keep = (gt >= 0) & (gt < k)
        if valid is not None:
            keep &= np.asarray(valid, bool).ravel()
        pred = np.where((pred >= 0) & (pred < k), pred, k)
        idx = gt[keep] * (k + 1) + pred[keep]
        self.matrix += np.bincount(idx, minlength=k * (k + 1)).reshape(self.matrix.shape)
        return self

    def merge(self, other: "ConfusionAccumulator"):
        self.matrix += other.matrix
        return self

    def ious(self) -> np.ndarray:
        k = self.num_classes
        tp = np.diag(self.matrix[:, :k]).astype(np.float64)
        union = self.matrix[:, :k].sum(0) + self.matrix.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def miou(self, classes: Optional[Sequence[int]] = None) -> float:
        vals = self.ious()
        if classes is not None:
            vals = vals[list(classes)]
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else float("nan")
