"""Phased training over a mixed-annotation dataset, plus checkpoint I/O."""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from roicam import __version__
from roicam.data import AnnotatedSample, MixedAnnotationDataset
from roicam.losses import DICE_EPS, LossWeights, bce_from_logits, per_sample_dice_loss
from roicam.network import (
    ArchConfig,
    CamNetwork,
    DualHeadNetwork,
    TrainableScope,
    build_cam_head,
    set_trainable,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class LossKind(str, enum.Enum):
    BCE_ONLY = "bce_only"
    COMBINED = "combined"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    name: str
    scope: TrainableScope
    loss: LossKind
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "scope", TrainableScope(self.scope))
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError(f"phase {self.name!r}: invalid epochs/batch_size/learning_rate")
        if self.loss is LossKind.COMBINED and self.scope is not TrainableScope.ALL:
            raise ValueError(f"phase {self.name!r}: combined loss needs scope 'all'")
        if self.loss is LossKind.BCE_ONLY and self.scope is TrainableScope.ALL:
            raise ValueError(f"phase {self.name!r}: bce_only phases train the ED unit or a dense head only")

    def to_dict(self) -> dict:
        return {**asdict(self), "scope": self.scope.value, "loss": self.loss.value}


@dataclass(frozen=True)
class TrainingSchedule:
    phases: tuple[PhaseConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))

    def validate(self) -> None:
        if not self.phases or self.phases[-1].scope is not TrainableScope.CAM_DENSE_ONLY:
            raise ValueError("schedule must end with CAM fit")
        for p in self.phases[:-1]:
            if p.scope is TrainableScope.CAM_DENSE_ONLY:
                raise ValueError(f"phase {p.name!r}: only the final phase may fit the CAM head")


def default_schedule(
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    cam_epochs: int = 10,
    epochs: Sequence[int] = (5, 10, 20, 50),
    cam_learning_rate: float | None = 0.1,
) -> TrainingSchedule:
    """ED warm-up, joint, dense refit, long joint, then the CAM dense fit.

    The CAM fit trains a single 16-to-1 linear layer on frozen features; at
    the network learning rate it barely moves in a few epochs, so it gets its
    own ``cam_learning_rate`` (``None`` reuses ``learning_rate``).
    """
    kw = dict(batch_size=batch_size, learning_rate=learning_rate)
    e1, e2, e3, e4 = epochs
    return TrainingSchedule(
        (
            PhaseConfig("ed_warmup", TrainableScope.ED_ONLY, LossKind.BCE_ONLY, e1, **kw),
            PhaseConfig("joint", TrainableScope.ALL, LossKind.COMBINED, e2, **kw),
            PhaseConfig("dense_refit", TrainableScope.ED_DENSE_ONLY, LossKind.BCE_ONLY, e3, **kw),
            PhaseConfig("joint_long", TrainableScope.ALL, LossKind.COMBINED, e4, **kw),
            PhaseConfig(
                "cam_fit", TrainableScope.CAM_DENSE_ONLY, LossKind.BCE_ONLY, cam_epochs, batch_size,
                cam_learning_rate if cam_learning_rate is not None else learning_rate,
            ),
        )
    )


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    bce: float
    dice: float
    loss: float
    val_accuracy: float | None
    val_dice: float | None
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def extend(self, other: TrainingLog) -> None:
        self.records.extend(other.records)

    def to_jsonl(self, path, header: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if header is not None:
                fh.write(json.dumps({"type": "header", **header}, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps({"type": "epoch", **asdict(r)}, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> TrainingLog:
        out = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            row = json.loads(line)
            if row.pop("type", "epoch") == "epoch":
                out.records.append(EpochRecord(**row))
        return out


class _Tensors:
    def __init__(self, samples: Sequence[AnnotatedSample]):
        if not samples:
            raise ValueError("empty dataset")
        self.images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
        self.labels = torch.tensor([float(s.label) for s in samples], dtype=torch.float32)
        self.annotated = torch.tensor([s.annotated for s in samples], dtype=torch.bool)
        masks = np.zeros(self.images.shape, dtype=np.float32)
        for i, s in enumerate(samples):
            if s.mask is not None:
                masks[i] = s.mask
        self.masks = torch.from_numpy(masks)

    def __len__(self):
        return self.images.shape[0]


def _samples_of(data) -> list[AnnotatedSample]:
    return list(data.samples if isinstance(data, MixedAnnotationDataset) else data)


def _encode_all(net, images: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([net.features(images[i : i + chunk]) for i in range(0, len(images), chunk)])


def validate(net, val: _Tensors, threshold: float = 0.5, epsilon: float = DICE_EPS) -> tuple[float, float | None]:
    """Validation accuracy and, for a dual-head net, mean dice coefficient on annotated samples."""
    net.eval()
    feats = _encode_all(net, val.images)
    with torch.no_grad():
        probs = torch.sigmoid(net.class_logits(feats))
        acc = float(((probs >= threshold).float() == val.labels).float().mean())
        dice = None
        if isinstance(net, DualHeadNetwork) and val.annotated.any():
            seg = torch.sigmoid(net.seg_logits(feats[val.annotated]))
            dice = float(1.0 - per_sample_dice_loss(seg, val.masks[val.annotated], epsilon).mean())
    return acc, dice


def run_phase(
    net: DualHeadNetwork | CamNetwork,
    data,
    phase: PhaseConfig,
    seed: int,
    validation: Sequence[AnnotatedSample] | None = None,
    weights: LossWeights = LossWeights(),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainingLog:
    """Train ``net`` for ``phase.epochs`` seeded-shuffle passes over ``data``.

    Only the phase's scope is trainable and a fresh Adam state is used.
    When the scope leaves the encoder frozen its features are computed once
    and reused; the updates are the same as re-encoding every batch.
    """
    train = _Tensors(_samples_of(data))
    val = _Tensors(validation) if validation else None
    trainable = set_trainable(net, phase.scope)
    combined = phase.loss is LossKind.COMBINED
    if combined and not isinstance(net, DualHeadNetwork):
        raise ValueError(f"phase {phase.name!r}: combined loss needs a DualHeadNetwork")
    out = TrainingLog()
    if phase.epochs == 0:
        return out

    opt = torch.optim.Adam(trainable, lr=phase.learning_rate)
    cached = None
    if not any(p.requires_grad for p in net.encoder.parameters()):
        cached = _encode_all(net, train.images)

    n = len(train)
    for epoch in range(phase.epochs):
        t0 = time.perf_counter()
        net.train()
        order = torch.from_numpy(np.random.default_rng([seed, epoch]).permutation(n))
        sums = np.zeros(3)
        for start in range(0, n, phase.batch_size):
            idx = order[start : start + phase.batch_size]
            feats = cached[idx] if cached is not None else net.features(train.images[idx])
            bce = bce_from_logits(net.class_logits(feats), train.labels[idx])
            ann = train.annotated[idx]
            dice = bce.new_zeros(())
            if combined and ann.any():
                seg_pred = torch.sigmoid(net.seg_logits(feats[ann]))
                dice = per_sample_dice_loss(seg_pred, train.masks[idx][ann], weights.dice_epsilon).mean()
            total = bce + weights.lambda_dice * dice if combined else bce
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss in phase {phase.name!r}, epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            sums += len(idx) * np.array([bce.item(), dice.item(), total.item()])
        val_acc, val_dice = validate(net, val, epsilon=weights.dice_epsilon) if val is not None else (None, None)
        rec = EpochRecord(
            phase.name, epoch, *(sums / n).tolist(), val_acc, val_dice, time.perf_counter() - t0
        )
        log.debug("%s epoch %d: loss %.4f val_acc %s", phase.name, epoch, rec.loss, val_acc)
        out.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    net.eval()
    return out


def _phase_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_full_schedule(
    net: DualHeadNetwork,
    data,
    schedule: TrainingSchedule,
    seed: int,
    validation: Sequence[AnnotatedSample] | None = None,
    weights: LossWeights = LossWeights(),
    checkpoint_dir=None,
    checkpoint_extra: dict | None = None,
) -> tuple[DualHeadNetwork, CamNetwork, TrainingLog]:
    """Run every phase in order, performing the CAM head surgery before the last one.

    With ``checkpoint_dir`` a checkpoint is written after each phase, plus
    ``best_val.pt`` holding the dual-head state with the best validation
    accuracy seen (a convenience copy; the returned networks are always the
    final ones).
    """
    schedule.validate()
    full = TrainingLog()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    best = {"acc": -math.inf, "state": None}

    def track_best(rec: EpochRecord) -> None:
        if rec.val_accuracy is not None and rec.val_accuracy > best["acc"]:
            best["acc"] = rec.val_accuracy
            best["state"] = {k: v.detach().clone() for k, v in net.state_dict().items()}

    cam = None
    for i, phase in enumerate(schedule.phases):
        target = net
        if phase.scope is TrainableScope.CAM_DENSE_ONLY:
            cam = build_cam_head(net, seed=_phase_seed(seed, 1000 + i))
            target = cam
        log.info("phase %d/%d %s (%d epochs)", i + 1, len(schedule.phases), phase.name, phase.epochs)
        full.extend(
            run_phase(
                target,
                data,
                phase,
                _phase_seed(seed, i),
                validation,
                weights,
                on_epoch=track_best if target is net else None,
            )
        )
        if ckdir is not None:
            extra = {**(checkpoint_extra or {}), "phase": phase.to_dict(), "phase_index": i}
            save_checkpoint(target, ckdir / f"phase{i + 1}_{phase.name}.pt", seed=seed, extra=extra)
    if ckdir is not None and best["state"] is not None:
        snapshot = DualHeadNetwork(net.config)
        snapshot.load_state_dict(best["state"])
        extra = {**(checkpoint_extra or {}), "best_val_accuracy": best["acc"]}
        save_checkpoint(snapshot, ckdir / "best_val.pt", seed=seed, extra=extra)
    return net, cam, full


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: DualHeadNetwork | CamNetwork, path, seed: int | None = None, extra: dict | None = None) -> None:
    """One archive with the named parameter tensors, the ArchConfig and the seed."""
    kind = "cam" if isinstance(net, CamNetwork) else "dual"
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "kind": kind,
        "config": net.config.to_dict(),
        "seed": seed,
        "extra_json": json.dumps(extra or {}, sort_keys=True),
        "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
    }
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")
    payload["extra"] = json.loads(payload.pop("extra_json", "{}"))
    return payload


def load_checkpoint(path, config: ArchConfig | None = None) -> DualHeadNetwork | CamNetwork:
    """Rebuild the saved network; with ``config``, insist that it matches."""
    payload = read_checkpoint(path)
    saved = ArchConfig.from_dict(payload["config"])
    if config is not None and config != saved:
        diff = [k for k in saved.to_dict() if saved.to_dict()[k] != config.to_dict()[k]]
        raise CheckpointError(f"config mismatch on load, differing field(s): {', '.join(diff)}")
    net = CamNetwork(saved) if payload["kind"] == "cam" else DualHeadNetwork(saved)
    try:
        net.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the saved config: {exc}") from exc
    if isinstance(net, CamNetwork):
        set_trainable(net, TrainableScope.CAM_DENSE_ONLY)
    net.eval()
    return net
