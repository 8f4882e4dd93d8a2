"""Classification metrics, IOU-based ROI correctness and experiment reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from roicam import __version__
from roicam.data import DISEASED, AnnotatedSample, boxes_to_mask, component_boxes
from roicam.explain import RoiPrediction, binarize_heatmap, compute_cams
from roicam.network import CamNetwork, DualHeadNetwork

TABLE_COLUMNS = (
    "model/ratio",
    "Accuracy",
    "AUC",
    "Specificity",
    "Sensitivity",
    "Total Images",
    "Correct ROIs",
    "Accuracy of detection",
)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Counts with ``score >= threshold`` predicted diseased; ``threshold`` must lie in (0, 1)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.size == 0:
        raise ValueError("no samples to evaluate")
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def classification_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    """Accuracy, sensitivity and specificity in percent; ``None`` where the denominator is 0."""

    def pct(num, den):
        return 100.0 * num / den if den else None

    return {
        "accuracy": pct(cm.tp + cm.tn, cm.total),
        "sensitivity": pct(cm.tp, cm.tp + cm.fn),
        "specificity": pct(cm.tn, cm.tn + cm.fp),
    }


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties counted half.

    Rank-sum (Mann-Whitney) form with average ranks for ties.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("length mismatch")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def iou(a, b) -> float:
    """``|a & b| / |a | b|``; two empty masks agree perfectly and score 1."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def box_iou(pred_mask, truth_mask) -> float:
    """IOU after replacing each mask by the union of its component boxes."""
    pred_mask = np.asarray(pred_mask)
    truth_mask = np.asarray(truth_mask)
    return iou(
        boxes_to_mask(component_boxes(pred_mask), pred_mask.shape),
        boxes_to_mask(component_boxes(truth_mask), truth_mask.shape),
    )


@dataclass
class DetectionReport:
    total_images: int
    correct_rois: int
    detection_accuracy: float | None
    iou_threshold: float
    both_empty: int = 0

    def __post_init__(self):
        if not 0 <= self.correct_rois <= self.total_images:
            raise ValueError("correct_rois must lie in [0, total_images]")


def roi_detection(
    pred: Sequence[RoiPrediction | np.ndarray],
    gt: Sequence[np.ndarray],
    iou_threshold: float = 0.3,
    mode: str = "mask",
) -> DetectionReport:
    """Count ROIs whose IOU with ground truth reaches ``iou_threshold``.

    An IOU of exactly 0 is never a hit, so a zero threshold counts every
    prediction with any overlap. ``mode`` is ``"mask"`` (pixel masks) or
    ``"box"`` (component boxes).
    """
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} masks")
    if mode not in ("mask", "box"):
        raise ValueError(f"unknown IOU mode {mode!r}")
    score = iou if mode == "mask" else box_iou
    correct = both_empty = 0
    for p, g in zip(pred, gt):
        pm = p.mask if isinstance(p, RoiPrediction) else np.asarray(p)
        if not np.any(pm) and not np.any(g):
            both_empty += 1
        value = score(pm, g)
        if value >= iou_threshold and value > 0.0:
            correct += 1
    total = len(gt)
    accuracy = 100.0 * correct / total if total else None
    return DetectionReport(total, correct, accuracy, float(iou_threshold), both_empty)


@dataclass
class MetricsReport:
    """One experiment row: ED-head classification, CAM-head classification and ROI detection."""

    classification: dict[str, float | None]
    detection: DetectionReport
    classification_cam: dict[str, float | None] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "classification": self.classification,
            "classification_cam": self.classification_cam,
            "detection": asdict(self.detection),
            "config": self.config,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(
            classification=d["classification"],
            detection=DetectionReport(**d["detection"]),
            classification_cam=d.get("classification_cam", {}),
            config=d.get("config", {}),
            version=d.get("version", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> MetricsReport:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def table_row(self, name: str | None = None) -> list:
        def fmt(v):
            return "" if v is None else f"{v:.2f}"

        c, d = self.classification, self.detection
        return [
            name if name is not None else self.config.get("name", ""),
            fmt(c.get("accuracy")),
            fmt(c.get("auc")),
            fmt(c.get("specificity")),
            fmt(c.get("sensitivity")),
            d.total_images,
            d.correct_rois,
            fmt(d.detection_accuracy),
        ]

    def append_csv(self, path, name: str | None = None) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(TABLE_COLUMNS)
            writer.writerow(self.table_row(name))


def _scores(net, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            probs = net(images[i : i + chunk])
            if isinstance(probs, tuple):
                probs = probs[0]
            out.append(probs.numpy())
    return np.concatenate(out).astype(np.float64)


def _classification_block(scores, labels, threshold) -> dict[str, float | None]:
    metrics = classification_metrics(confusion(scores, labels, threshold))
    try:
        metrics["auc"] = 100.0 * auc(scores, labels)
    except ValueError:
        metrics["auc"] = None
    return metrics


def evaluate_experiment(
    net: DualHeadNetwork,
    cam_net: CamNetwork,
    test: Sequence[AnnotatedSample],
    class_threshold: float = 0.5,
    iou_threshold: float = 0.3,
    cam_tau: float = 0.5,
    roi_subset: str = "true_positive",
    iou_mode: str = "mask",
    config: dict | None = None,
) -> MetricsReport:
    """Score a trained pair of networks on a test split.

    Classification covers every test sample. ROI detection covers diseased
    samples with a ground-truth mask, restricted to those the ED head calls
    diseased when ``roi_subset == "true_positive"`` (``"all_diseased"`` keeps
    them all).
    """
    if not test:
        raise ValueError("empty test split")
    if roi_subset not in ("true_positive", "all_diseased"):
        raise ValueError(f"unknown roi_subset {roi_subset!r}")
    net.eval()
    cam_net.eval()
    images = torch.from_numpy(np.stack([s.image for s in test]).astype(np.float32))
    labels = np.array([s.label for s in test])
    ed_scores = _scores(net, images)
    cam_scores = _scores(cam_net, images)

    chosen = [
        i
        for i, s in enumerate(test)
        if s.label == DISEASED
        and s.mask is not None
        and (roi_subset == "all_diseased" or ed_scores[i] >= class_threshold)
    ]
    preds = []
    if chosen:
        heatmaps = compute_cams(cam_net, images[chosen])
        preds = [binarize_heatmap(h, cam_tau) for h in heatmaps]
    detection = roi_detection(preds, [test[i].mask for i in chosen], iou_threshold, iou_mode)

    echo = dict(config or {})
    echo.setdefault("thresholds", {"classification": class_threshold, "iou": iou_threshold, "cam_tau": cam_tau})
    echo.setdefault("roi_subset", roi_subset)
    echo.setdefault("iou_mode", iou_mode)
    return MetricsReport(
        classification=_classification_block(ed_scores, labels, class_threshold),
        detection=detection,
        classification_cam=_classification_block(cam_scores, labels, class_threshold),
        config=echo,
    )
