# coding: utf-8

# # An open-set head on a toy problem
#
# Each known class scores a pixel by its scaled squared distance to a learned
# prototype. One more score, a single learned constant, stands for "none of
# the above". Far from every prototype that constant wins, so the pixel is
# labelled unknown.

# %%

import numpy as np

from vcas.harness import gaussian_toy
from vcas.harness.synth import known_only
from vcas.metrics import compute_ca_iou
from vcas.openset import TrainConfig, predict_labels, predict_probs, train

# %% [markdown]
# ## Data
#
# Three known 2-D clusters (labels 0-2) and a fourth cluster that never
# appears in training (label 3).

# %%

toy = gaussian_toy(2000, seed=0)
train_set = known_only(toy, 3)
print("training points", train_set.labels.size, "of", toy.labels.size)

# %% [markdown]
# ## Training
#
# SGD with momentum 0.9, weight decay 1e-4, learning rate 0.005 dropped
# tenfold at steps 300 and 400, plus a weighted contrastive term on projected
# embeddings.

# %%

cfg = TrainConfig()
res = train([train_set], cfg, num_classes=3)
for step in (0, 100, 300, 499):
    l = res.losses[step]
    print(f"step {step:3d}  lr {res.lrs[step]:.5f}  seg {l.l_seg:.4f}  contrastive {l.l_cl:.4f}")
p = res.params
print("prototypes\n", np.round(p.mu, 2))
print("sigma", np.round(p.sigma, 3), "gamma", round(p.gamma, 3))

# %% [markdown]
# ## Evaluation on all four clusters

# %%

pred = predict_labels(toy, p)
y = toy.labels
print("known accuracy", (pred[y < 3] == y[y < 3]).mean())
print("unknown recall", (pred[y == 3] == 3).mean())
print("CA-IoU", compute_ca_iou(pred == 3, y == 3))

# %% [markdown]
# Along a line from a known centre into empty space, the unknown
# probability rises once the pixel leaves the cluster.

# %%

line = np.stack([np.linspace(4, 12, 9), np.zeros(9)], axis=1)
print(np.round(predict_probs(line, p)[:, 3], 3))
