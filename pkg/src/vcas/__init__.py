"""Evaluation and analysis toolkit for video class-agnostic segmentation."""

from .egoflow import (
    CameraIntrinsics,
    DepthMap,
    FlowField,
    PoseSE3,
    compute_ego_flow,
    flow_to_color,
    suppress_ego_flow,
)
from .labels import CategoryTable, LabelMap, Segment, extract_segments, iou
from .metrics import (
    MatchResult,
    compute_ca_iou,
    compute_caq,
    compute_pq,
    match_instances,
)
from .openset import EmbeddingMap, OpenSetParams, TrainConfig, train
from .prototypes import Prototype, agglomerative_cluster, masked_average_pool, pairwise_distances

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "DepthMap", "FlowField", "PoseSE3", "compute_ego_flow", "flow_to_color",
    "suppress_ego_flow", "CategoryTable", "LabelMap", "Segment", "extract_segments", "iou",
    "MatchResult", "compute_ca_iou", "compute_caq", "compute_pq", "match_instances",
    "EmbeddingMap", "OpenSetParams", "TrainConfig", "train", "Prototype",
    "agglomerative_cluster", "masked_average_pool", "pairwise_distances",
]
