# coding: utf-8

# # Class prototypes and their hierarchy
#
# A prototype is the mean feature of a class, pooled over every pixel that
# carries it. Clustering the prototypes shows which classes a network sees
# as alike, for instance whether test-time unknowns resemble the unknowns
# used in training.

# %%

import json

import numpy as np

from vcas.harness import generate_scene
from vcas.harness.synth import CATEGORIES, CLASS_NAMES
from vcas.prototypes import (
    ClassMask,
    FeatureMap,
    cluster_prototypes,
    dendrogram_to_dict,
    pairwise_distances,
    pool_all,
)

# %% [markdown]
# ## Pool features from a few scenes
#
# Synthetic scenes carry 4-D pixel embeddings with one centre per class.
# Masks are resampled to the feature resolution, so features may be coarser
# than labels.

# %%

batch = []
for seed in range(5):
    s = generate_scene(seed)
    coarse = s.embeddings[::2, ::2]
    batch.append((FeatureMap(coarse), ClassMask(s.semantic_gt)))

ps = pool_all(batch)
names = {c.id: c.name for c in CATEGORIES.entries} | CLASS_NAMES
for p in ps:
    print(f"{names[p.class_id]:14s} support {p.support:6d}  {np.round(p.vector, 2)}")

# %% [markdown]
# ## Distances and average linkage

# %%

print(np.round(pairwise_distances(ps), 2))
dg = cluster_prototypes(ps, names, "average")
for k, (a, b, h) in enumerate(dg.merges):
    print(f"node {len(ps) + k}: merge {a} + {b} at {h:.3f}")

# %% [markdown]
# The tree serialises to nested JSON that plotting tools can walk.

# %%

print(json.dumps(dendrogram_to_dict(dg)["tree"], indent=1)[:600])
