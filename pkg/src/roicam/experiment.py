"""End-to-end experiment: data, annotation mixing, phased training, evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from roicam import __version__
from roicam.data import (
    AnnotationType,
    DatasetSplit,
    PhantomConfig,
    degrade_dataset,
    generate_phantom_dataset,
    load_dataset,
    make_mixed_annotation,
    preprocess_sample,
)
from roicam.evaluation import MetricsReport, evaluate_experiment
from roicam.losses import LossWeights
from roicam.network import DESK_ARCH, ArchConfig, build_model
from roicam.training import TrainingSchedule, default_schedule, run_full_schedule

log = logging.getLogger(__name__)

ANNOTATION_ALIASES = {
    "accurate": AnnotationType.ACCURATE,
    "bbox": AnnotationType.BBOX,
    "random": AnnotationType.RANDOM_PATCH,
    "random_patch": AnnotationType.RANDOM_PATCH,
    "whole": AnnotationType.WHOLE_IMAGE,
    "whole_image": AnnotationType.WHOLE_IMAGE,
}


@dataclass
class ExperimentConfig:
    """Everything that determines one run; echoed into every artifact it writes."""

    name: str = ""
    phantom: dict[str, Any] | None = field(default_factory=lambda: PhantomConfig().to_dict())
    counts: dict[str, int] = field(default_factory=lambda: {"train": 600, "validation": 200, "test": 200})
    manifest: str | None = None
    data_root: str | None = None
    preprocess: bool = False
    threshold_fraction: float = 0.2
    ratio: float = 3
    baseline: bool = False
    annotation: str = "accurate"
    arch: dict[str, Any] = field(default_factory=DESK_ARCH.to_dict)
    epochs: list[int] = field(default_factory=lambda: [5, 10, 20, 50])
    cam_epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    cam_learning_rate: float = 0.1
    lambda_dice: float = 1.0
    dice_epsilon: float = 1.0
    seed_data: int = 0
    seed_model: int = 0
    seed_train: int = 0
    class_threshold: float = 0.5
    iou_threshold: float = 0.3
    cam_tau: float = 0.5
    roi_subset: str = "true_positive"
    iou_mode: str = "mask"
    out: str = "runs/experiment"

    def __post_init__(self):
        if self.annotation not in ANNOTATION_ALIASES:
            raise ValueError(f"unknown annotation mode {self.annotation!r}")
        if len(self.epochs) != 4:
            raise ValueError("epochs must list the four pre-CAM phase budgets")
        if self.manifest is None and self.phantom is None:
            raise ValueError("need either a phantom config or a manifest")
        if not self.baseline and not self.ratio >= 1:
            raise ValueError("ratio R must be >= 1")
        LossWeights(self.lambda_dice, self.dice_epsilon)

    @property
    def R(self) -> float:
        return math.inf if self.baseline else float(self.ratio)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        tag = "M_b" if self.baseline else f"1:{self.ratio:g}"
        return tag if self.annotation == "accurate" else f"{tag} {self.annotation}"

    def arch_config(self) -> ArchConfig:
        return ArchConfig.from_dict(self.arch)

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig.from_dict(self.phantom)

    def schedule(self) -> TrainingSchedule:
        return default_schedule(
            self.batch_size, self.learning_rate, self.cam_epochs, self.epochs, self.cam_learning_rate
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def provenance(config: ExperimentConfig) -> dict:
    return {"experiment": config.to_dict(), "version": __version__}


def load_split(config: ExperimentConfig) -> DatasetSplit:
    if config.manifest is not None:
        root = config.data_root or str(Path(config.manifest).parent)
        split = load_dataset(root, config.manifest)
    else:
        split = generate_phantom_dataset(config.phantom_config(), config.counts, config.seed_data)
    if config.preprocess:
        size = config.arch_config().input_size
        split = DatasetSplit(
            *([preprocess_sample(s, config.threshold_fraction, size) for s in part] for part in split.parts().values()),
            split.split_ratio,
        )
    return split


def prepare_training_set(config: ExperimentConfig, split: DatasetSplit):
    mixed = make_mixed_annotation(split.train, config.R, config.seed_data)
    mode = ANNOTATION_ALIASES[config.annotation]
    if mode is not AnnotationType.ACCURATE:
        mixed = degrade_dataset(mixed, mode, seed=config.seed_data)
    return mixed


def train_experiment(config: ExperimentConfig, split: DatasetSplit | None = None, checkpoint_dir=None):
    split = split if split is not None else load_split(config)
    mixed = prepare_training_set(config, split)
    log.info("%s: P=%d Q=%d", config.label, mixed.P, mixed.Q)
    net = build_model(config.arch_config(), seed=config.seed_model)
    return run_full_schedule(
        net,
        mixed,
        config.schedule(),
        seed=config.seed_train,
        validation=split.validation,
        weights=LossWeights(config.lambda_dice, config.dice_epsilon),
        checkpoint_dir=checkpoint_dir,
        checkpoint_extra=provenance(config),
    )


def evaluate_trained(config: ExperimentConfig, net, cam, split: DatasetSplit) -> MetricsReport:
    return evaluate_experiment(
        net,
        cam,
        split.test,
        class_threshold=config.class_threshold,
        iou_threshold=config.iou_threshold,
        cam_tau=config.cam_tau,
        roi_subset=config.roi_subset,
        iou_mode=config.iou_mode,
        config={**provenance(config), "name": config.label},
    )


def run_experiment(config: ExperimentConfig, split: DatasetSplit | None = None, checkpoint_dir=None):
    """Train and evaluate; returns ``(report, net, cam_net, training_log)``."""
    split = split if split is not None else load_split(config)
    net, cam, training_log = train_experiment(config, split, checkpoint_dir)
    return evaluate_trained(config, net, cam, split), net, cam, training_log
