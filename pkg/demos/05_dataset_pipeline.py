# coding: utf-8

# # From a dataset manifest to a report
#
# A manifest lists frames with paths to label maps, flow, depth and camera
# data. Evaluation scores each frame, optionally on several threads, and
# reduces the partial sums in manifest order, so reports are identical
# whatever the worker count.

# %%

import json
import os
import tempfile
from pathlib import Path

from vcas.cli import main
from vcas.harness import (
    EvalOptions,
    compute_stats,
    evaluate_dataset,
    load_manifest,
    report_to_csv,
    synth_dataset,
)

root = Path(os.environ.get("VCAS_DEMO_OUT", tempfile.mkdtemp(prefix="vcas-demo-"))) / "dataset"

# %% [markdown]
# ## Write a synthetic dataset

# %%

synth_dataset(root, seed=7, frames=12)
m = load_manifest(root / "manifest.json")
print(len(m), "frames;", sum(f.split == "train" for f in m.frames), "for training")
print(json.dumps(json.loads((root / "manifest.json").read_text())["frames"][0], indent=1)[:500])

# %% [markdown]
# ## Class-agnostic scores, with and without ego-flow suppression
#
# The CA scores do not change. The flow diagnostics do: without suppression
# the camera's motion makes everything look like it moves.

# %%

for efs in (False, True):
    print(report_to_csv(evaluate_dataset(m, "ca", EvalOptions(efs=efs), workers=4)))

# %% [markdown]
# ## Panoptic and open-set tracks

# %%

print(report_to_csv(evaluate_dataset(m, "panoptic")))
print(report_to_csv(evaluate_dataset(m, "openset")))

# %% [markdown]
# ## Dataset statistics

# %%

st = compute_stats(m)
print("moving", st.moving, "static", st.static)
print("pixels per class", st.pixels)

# %% [markdown]
# ## The same through the command line

# %%

status = main(["evaluate-ca", "--manifest", str(root / "manifest.json"), "--efs",
               "--out-csv", str(root / "ca.csv"), "--out-json", str(root / "ca.json")])
print("exit status", status)
print((root / "ca.csv").read_text())
