"""Incremental zero-shot detection core: tail models over semantic distances,
projection losses, exemplar-memory incremental training and AP evaluation."""

from .ever import ClassEvtModel, EvtBank, classify, classify_batch, fit_class_model, p_min
from .gpd import ExceedanceSample, GpdParams, fit_gpd_mle, gpd_cdf, qq_points, select_threshold
from .losses import HyperParams
from .memory import ExemplarMemory, ExemplarRecord, rebalance, select_exemplars
from .metrics import Detection, GroundTruth, average_precision, iou, map_over
from .protocol import ClassSplit, Dataset, SyntheticSpec, generate_synthetic, run_protocol
from .semantic import Registry, SemanticTable, build_table, zsc_probs
from .trainer import ModelState, TrainConfig, init_state, train_first_step, train_incremental_step

__version__ = "0.1.0"

__all__ = [
    "ClassEvtModel",
    "ClassSplit",
    "Dataset",
    "Detection",
    "EvtBank",
    "ExceedanceSample",
    "ExemplarMemory",
    "ExemplarRecord",
    "GpdParams",
    "GroundTruth",
    "HyperParams",
    "ModelState",
    "Registry",
    "SemanticTable",
    "SyntheticSpec",
    "TrainConfig",
    "average_precision",
    "build_table",
    "classify",
    "classify_batch",
    "fit_class_model",
    "fit_gpd_mle",
    "generate_synthetic",
    "gpd_cdf",
    "init_state",
    "iou",
    "map_over",
    "p_min",
    "qq_points",
    "rebalance",
    "run_protocol",
    "select_exemplars",
    "select_threshold",
    "train_first_step",
    "train_incremental_step",
    "zsc_probs",
]
