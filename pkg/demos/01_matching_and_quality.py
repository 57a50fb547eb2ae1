# coding: utf-8

# # Matching segments and scoring them
#
# Every metric in vcas starts from the same step: pair predicted segments
# with ground-truth segments whose IoU is strictly above 0.5. At that
# threshold a segment can have at most one partner, so matching is a lookup
# in the overlap table rather than an assignment problem.

# %%

import numpy as np

from vcas.labels import CategoryTable, LabelMap, contingency_table
from vcas.metrics import MatchResult, compute_caq, compute_pq, match_instances

# %% [markdown]
# ## A small class-agnostic frame
#
# Two ground-truth objects. The first prediction is shifted by two columns,
# the second prediction covers only a third of its object.

# %%

gt = np.zeros((12, 20), np.uint32)
gt[2:8, 2:10] = 1
gt[2:8, 12:18] = 2
pred = np.zeros_like(gt)
pred[2:8, 4:12] = 7
pred[2:8, 12:14] = 8

print(contingency_table(LabelMap(pred), LabelMap(gt)))
m = match_instances(LabelMap(pred), LabelMap(gt))
print("TP", m.tp, "FP", m.fp, "FN", m.fn)

# %% [markdown]
# Class-agnostic quality uses SQ (mean IoU of the matches), RQ (matched
# fraction of the ground truth; false positives do not count) and their
# product CAQ.

# %%

print(compute_caq(m).as_dict())

# %% [markdown]
# ## IoUs 0.8 and 0.6 plus two misses
#
# SQ = 0.7 and RQ = 2 / 4, so CAQ = 0.35.

# %%

r = MatchResult(tp=[(1, 1, 0.8), (2, 2, 0.6)], fn=[3, 4])
print(compute_caq(r))

# %% [markdown]
# ## Panoptic quality
#
# Panoptic ids encode the category as ``id // 1000``. Ground-truth id 0 is
# void: void pixels leave the union, and predictions lying mostly on void
# are dropped instead of counted as false positives.

# %%

cats = CategoryTable.from_records([
    {"id": 7, "name": "road", "isthing": False},
    {"id": 26, "name": "car", "isthing": True},
])
pgt = np.full((10, 10), 7000, np.uint32)
pgt[0] = 0
pgt[3:7, 3:7] = 26001
ppred = np.full((10, 10), 7000, np.uint32)
ppred[3:7, 4:8] = 26001
report = compute_pq(match_instances(LabelMap(ppred, True), LabelMap(pgt, True), class_aware=True), cats)
for k, v in report.per_class.items():
    print(k, v["name"], round(v["PQ"], 4))
print("PQ_All", report.pq_all, "PQ_Th", report.pq_th, "PQ_St", report.pq_st)
