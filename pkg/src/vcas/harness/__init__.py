"""Manifests, synthetic data, dataset statistics and batch evaluation."""

from .evaluate import (
    TRACKS,
    EvalOptions,
    evaluate_dataset,
    recompute_aggregate,
    report_to_csv,
    report_to_json,
    suppress_dataset,
)
from .manifest import (
    DuplicateFrameError,
    Frame,
    Manifest,
    ManifestError,
    ManifestSchemaError,
    MissingFileError,
    OpenSetSpec,
    load_manifest,
    save_manifest,
)
from .stats import DatasetStats, MissingMotionFlags, compute_stats
from .synth import ObjectSpec, SceneSpec, SynthScene, gaussian_toy, generate_scene, synth_dataset

__all__ = [
    "TRACKS", "EvalOptions", "evaluate_dataset", "recompute_aggregate", "report_to_csv",
    "report_to_json", "suppress_dataset", "DuplicateFrameError", "Frame", "Manifest",
    "ManifestError", "ManifestSchemaError", "MissingFileError", "OpenSetSpec", "load_manifest",
    "save_manifest", "DatasetStats", "MissingMotionFlags", "compute_stats", "ObjectSpec",
    "SceneSpec", "SynthScene", "gaussian_toy", "generate_scene", "synth_dataset",
]
