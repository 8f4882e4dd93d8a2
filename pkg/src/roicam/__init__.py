"""Explainable binary image classification with weakly supervised CAM heatmaps.

A dual-head encoder/decoder network is trained in phases on a dataset where
only a fraction of the images carry region masks; heatmaps come from a
GAP + dense head fitted on the frozen encoder.
"""

__version__ = "0.1.0"

from roicam.data import (
    AnnotatedSample,
    AnnotationType,
    DatasetSplit,
    MixedAnnotationDataset,
    PhantomConfig,
    degrade_annotation,
    generate_phantom_dataset,
    load_dataset,
    make_mixed_annotation,
    preprocess_crop_layers,
)
from roicam.network import ArchConfig, CamNetwork, DualHeadNetwork, build_cam_head, build_model, set_trainable
from roicam.losses import LossWeights, bce_loss, combined_loss, dice_loss
from roicam.training import (
    PhaseConfig,
    TrainingSchedule,
    default_schedule,
    load_checkpoint,
    run_full_schedule,
    run_phase,
    save_checkpoint,
)
from roicam.explain import Heatmap, RoiPrediction, binarize_heatmap, compute_cam, patch_inference
from roicam.evaluation import (
    ConfusionMatrix,
    DetectionReport,
    MetricsReport,
    auc,
    classification_metrics,
    confusion,
    evaluate_experiment,
    iou,
    roi_detection,
)

__all__ = [
    "AnnotatedSample",
    "AnnotationType",
    "DatasetSplit",
    "MixedAnnotationDataset",
    "PhantomConfig",
    "degrade_annotation",
    "generate_phantom_dataset",
    "load_dataset",
    "make_mixed_annotation",
    "preprocess_crop_layers",
    "PhaseConfig",
    "TrainingSchedule",
    "default_schedule",
    "load_checkpoint",
    "run_full_schedule",
    "run_phase",
    "save_checkpoint",
    "ConfusionMatrix",
    "DetectionReport",
    "MetricsReport",
    "auc",
    "classification_metrics",
    "confusion",
    "evaluate_experiment",
    "iou",
    "roi_detection",
    "ArchConfig",
    "CamNetwork",
    "DualHeadNetwork",
    "build_cam_head",
    "build_model",
    "set_trainable",
    "LossWeights",
    "bce_loss",
    "combined_loss",
    "dice_loss",
    "Heatmap",
    "RoiPrediction",
    "binarize_heatmap",
    "compute_cam",
    "patch_inference",
]
