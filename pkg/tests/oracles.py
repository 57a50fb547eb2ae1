"""Slow, obviously-correct reference computations used by the tests.

Nothing in here imports the fast paths it checks.
"""

import itertools
import math

import numpy as np


def brute_contingency(pred_ids, gt_ids):
    out = {}
    for p in np.unique(pred_ids):
        pm = pred_ids == p
        for g in np.unique(gt_ids):
            n = int(np.count_nonzero(pm & (gt_ids == g)))
            if n:
                out[(int(p), int(g))] = n
    return out


def brute_match(pred_ids, gt_ids, class_aware=False, void=None):
    """All-pairs matching with explicit pixel masks.

    Returns ``(tp, fp, fn, ignored)``; ``tp`` is sorted by gt id.
    """
    if class_aware and void is None:
        void = gt_ids == 0
    preds = [int(p) for p in np.unique(pred_ids) if p != 0]
    gts = [int(g) for g in np.unique(gt_ids) if g != 0]
    tp = []
    used_p, used_g = set(), set()
    for g in gts:
        gm = gt_ids == g
        for p in preds:
            if class_aware and p // 1000 != g // 1000:
                continue
            pm = pred_ids == p
            inter = np.count_nonzero(pm & gm)
            union = np.count_nonzero(pm | gm)
            if void is not None:
                union -= np.count_nonzero(pm & void)
            value = inter / union if union else 0.0
            if value > 0.5:
                tp.append((p, g, value))
                used_p.add(p)
                used_g.add(g)
    fp, ignored = [], []
    for p in preds:
        if p in used_p:
            continue
        pm = pred_ids == p
        on_void = np.count_nonzero(pm & void) if void is not None else 0
        (ignored if on_void > 0.5 * np.count_nonzero(pm) else fp).append(p)
    fn = [g for g in gts if g not in used_g]
    return tp, fp, fn, ignored


def exhaustive_average_linkage(d):
    """Average linkage by recomputing every cluster distance from scratch.

    Node ids follow the usual convention: leaves 0..n-1, merge k creates n+k.
    Ties go to the smallest ``(left, right)`` node pair.
    """
    d = np.asarray(d, float)
    n = d.shape[0]
    clusters = {i: [i] for i in range(n)}
    merges = []
    next_id = n
    while len(clusters) > 1:
        best = None
        keys = sorted(clusters)
        for a, b in itertools.combinations(keys, 2):
            vals = [d[i, j] for i in clusters[a] for j in clusters[b]]
            h = math.fsum(vals) / len(vals)
            if best is None or h < best[0]:
                best = (h, a, b)
        h, a, b = best
        merges.append((a, b, h))
        clusters[next_id] = clusters.pop(a) + clusters.pop(b)
        next_id += 1
    return merges


def finite_difference(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def homography_flow(K, R, t, n, dist, height, width):
    """Flow induced on the plane ``n . X = dist`` via the plane homography.

    ``H = K (R + t n^T / dist) K^-1`` maps frame-1 pixels to frame-2 pixels.
    """
    H = K @ (R + np.outer(t, n) / dist) @ np.linalg.inv(K)
    v, u = np.mgrid[0:height, 0:width].astype(float)
    pts = np.stack([u, v, np.ones_like(u)], -1) @ H.T
    return pts[..., 0] / pts[..., 2] - u, pts[..., 1] / pts[..., 2] - v


def plane_depth(K, n, dist, height, width):
    v, u = np.mgrid[0:height, 0:width].astype(float)
    rays = np.stack([u, v, np.ones_like(u)], -1) @ np.linalg.inv(K).T
    return dist / (rays @ n)
