"""Samples, dataset splits, ingestion, preprocessing and annotation handling.

Images are 2-D float32 arrays in [0, 1]; masks are 2-D uint8 arrays with
1 marking the suspect region. A sample without a mask is unannotated.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage


class AnnotationType(str, enum.Enum):
    ACCURATE = "accurate"
    BBOX = "bbox"
    RANDOM_PATCH = "random_patch"
    WHOLE_IMAGE = "whole_image"
    NONE = "none"


NORMAL, DISEASED = 0, 1

_LABEL_NAMES = {"0": NORMAL, "normal": NORMAL, "1": DISEASED, "diseased": DISEASED}


@dataclass(frozen=True, eq=False)
class AnnotatedSample:
    image: np.ndarray
    label: int
    mask: np.ndarray | None = None
    annotation_type: AnnotationType = AnnotationType.NONE
    sample_id: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"{self.sample_id}: image must be 2-D, got shape {self.image.shape}")
        if self.label not in (NORMAL, DISEASED):
            raise ValueError(f"{self.sample_id}: unknown label {self.label!r}")
        object.__setattr__(self, "annotation_type", AnnotationType(self.annotation_type))
        if self.mask is None:
            if self.annotation_type is not AnnotationType.NONE:
                raise ValueError(f"{self.sample_id}: annotation_type {self.annotation_type.value} without a mask")
            return
        if self.mask.shape != self.image.shape:
            raise ValueError(
                f"{self.sample_id}: mask shape {self.mask.shape} does not match image shape {self.image.shape}"
            )
        if self.annotation_type is AnnotationType.NONE:
            raise ValueError(f"{self.sample_id}: mask present but annotation_type is none")
        if self.label == NORMAL and self.mask.any():
            raise ValueError(f"{self.sample_id}: normal sample with a non-empty mask")

    @property
    def annotated(self) -> bool:
        return self.mask is not None

    def without_mask(self) -> AnnotatedSample:
        return replace(self, mask=None, annotation_type=AnnotationType.NONE)


@dataclass
class MixedAnnotationDataset:
    """Training samples of which exactly ``Q`` keep their masks (ratio 1:R)."""

    samples: list[AnnotatedSample]
    P: int
    Q: int
    R: float
    seed: int

    def __len__(self):
        return len(self.samples)

    @property
    def n_annotated(self) -> int:
        return sum(s.annotated for s in self.samples)


@dataclass
class DatasetSplit:
    train: list[AnnotatedSample]
    validation: list[AnnotatedSample]
    test: list[AnnotatedSample]
    split_ratio: tuple[float, float, float] = (60.0, 25.0, 15.0)

    def __post_init__(self):
        ids = [s.sample_id for s in self.train + self.validation + self.test]
        if len(ids) != len(set(ids)):
            raise ValueError("splits are not disjoint by sample_id")

    def parts(self) -> dict[str, list[AnnotatedSample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def split_samples(
    samples: Sequence[AnnotatedSample],
    ratio: tuple[float, float, float] = (60.0, 25.0, 15.0),
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle ``samples`` under ``seed`` and cut them by ``ratio``."""
    order = np.random.default_rng(seed).permutation(len(samples))
    total = float(sum(ratio))
    n_train = int(round(len(samples) * ratio[0] / total))
    n_val = int(round(len(samples) * ratio[1] / total))
    shuffled = [samples[i] for i in order]
    return DatasetSplit(
        shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :], tuple(ratio)
    )


# ---------------------------------------------------------------------------
# preprocessing


def find_layer_band(image: np.ndarray, threshold_fraction: float = 0.2) -> tuple[int, int]:
    """Half-open row range ``[top, bottom)`` spanning every row whose sum
    exceeds ``threshold_fraction`` of the largest row sum."""
    if not 0.0 < threshold_fraction < 1.0:
        raise ValueError("threshold_fraction must lie in (0, 1)")
    row_sums = np.asarray(image, dtype=np.float64).sum(axis=1)
    peak = row_sums.max(initial=0.0)
    if not peak > 0.0:
        raise ValueError("empty image")
    rows = np.flatnonzero(row_sums > threshold_fraction * peak)
    if rows.size == 0:
        raise ValueError("no layer band found")
    return int(rows[0]), int(rows[-1]) + 1


def _resize(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    if nearest:
        img = Image.fromarray(arr.astype(np.uint8))
        return np.asarray(img.resize((size, size), Image.NEAREST), dtype=np.uint8)
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.clip(np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32), 0.0, 1.0)


def preprocess_crop_layers(
    image: np.ndarray,
    threshold_fraction: float = 0.2,
    output_size: int | None = None,
    mask: np.ndarray | None = None,
):
    """Crop ``image`` to its layered row band.

    Rows are reduced to their sums and thresholded against the brightest row;
    the band runs from the first to the last passing row, so dark layers
    inside the band are kept. With ``output_size`` the band is resized to a
    square of that side. When ``mask`` is given, ``(image, mask)`` is returned
    with the mask cropped the same way.
    """
    image = np.asarray(image, dtype=np.float32)
    top, bottom = find_layer_band(image, threshold_fraction)
    band = image[top:bottom]
    band_mask = None if mask is None else np.asarray(mask, dtype=np.uint8)[top:bottom]
    if output_size is not None:
        band = _resize(band, output_size, nearest=False)
        if band_mask is not None:
            band_mask = _resize(band_mask, output_size, nearest=True)
    if mask is None:
        return band
    return band, band_mask


def preprocess_sample(
    sample: AnnotatedSample, threshold_fraction: float = 0.2, output_size: int | None = None
) -> AnnotatedSample:
    if sample.mask is None:
        image = preprocess_crop_layers(sample.image, threshold_fraction, output_size)
        return replace(sample, image=image)
    image, mask = preprocess_crop_layers(sample.image, threshold_fraction, output_size, mask=sample.mask)
    if sample.label == NORMAL:
        mask = np.zeros_like(mask)
    return replace(sample, image=image, mask=mask)


# ---------------------------------------------------------------------------
# annotation mixing and degradation


def annotated_count(P: int, R: float) -> int:
    """Q = round(P / R), halves rounded up; ``R = inf`` gives the baseline Q = 0."""
    if math.isinf(R):
        return 0
    return int(math.floor(P / R + 0.5))


def make_mixed_annotation(train: Sequence[AnnotatedSample], R: float, seed: int) -> MixedAnnotationDataset:
    """Keep masks on exactly Q = round(P/R) training samples and drop the rest.

    Selection is uniform without replacement, stratified by class with
    largest-remainder quotas so both classes keep their share of masks.
    Pass ``R=math.inf`` for the label-only baseline.
    """
    if not train:
        raise ValueError("empty training set")
    if not R >= 1:
        raise ValueError(f"R must be >= 1, got {R}")
    missing = [s.sample_id for s in train if s.mask is None]
    if missing:
        raise ValueError(f"samples without masks cannot be mixed (masks are never invented): {missing[:5]}")

    P = len(train)
    Q = annotated_count(P, R)
    labels = np.array([s.label for s in train])
    classes = [NORMAL, DISEASED]
    members = {c: np.flatnonzero(labels == c) for c in classes}
    exact = {c: Q * len(members[c]) / P for c in classes}
    quota = {c: int(math.floor(exact[c])) for c in classes}
    for c in sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))[: Q - sum(quota.values())]:
        quota[c] += 1

    rng = np.random.default_rng(seed)
    keep = np.zeros(P, dtype=bool)
    for c in classes:
        if quota[c]:
            keep[rng.choice(members[c], size=quota[c], replace=False)] = True

    samples = [s if k else s.without_mask() for s, k in zip(train, keep)]
    return MixedAnnotationDataset(samples=samples, P=P, Q=Q, R=R, seed=seed)


def component_boxes(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Tight boxes ``(top, left, bottom, right)``, half-open, of the 4-connected components."""
    labelled, _ = ndimage.label(np.asarray(mask) > 0)
    return [(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop) for sl in ndimage.find_objects(labelled)]


def boxes_to_mask(boxes, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.uint8)
    for top, left, bottom, right in boxes:
        out[top:bottom, left:right] = 1
    return out


def _rect_for_area(target: int, aspect: float, shape: tuple[int, int]) -> tuple[int, int]:
    # Among rectangles within one pixel of the target area, pick the one whose
    # height/width ratio is closest to the source component's.
    H, W = shape
    best = None
    for h in range(1, H + 1):
        for w in {max(1, target // h), target // h + 1}:
            if w > W or abs(h * w - target) > 1:
                continue
            cost = (abs(math.log(h / w) - math.log(aspect)), abs(h * w - target))
            if best is None or cost < best[0]:
                best = (cost, h, w)
    if best is None:  # target too large for the image
        return H, W
    return best[1], best[2]


def _random_patches(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    H, W = mask.shape
    labelled, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask)
    areas = ndimage.sum_labels(np.ones_like(mask), labelled, index=np.arange(1, n + 1)).astype(int)
    boxes = component_boxes(mask)
    out = np.zeros_like(mask)
    # Keeps a one-pixel gap around earlier rectangles so the count survives.
    blocked = np.zeros((H, W), dtype=bool)
    carry = 0
    for area, (t, l, b, r) in zip(areas, boxes):
        target = max(1, int(area) + carry)
        h, w = _rect_for_area(target, (b - t) / (r - l), (H, W))
        carry = target - h * w
        for _ in range(200):
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            if not blocked[max(top - 1, 0) : top + h + 1, max(left - 1, 0) : left + w + 1].any():
                break
        out[top : top + h, left : left + w] = 1
        blocked[top : top + h, left : left + w] = True
    return out


def degrade_annotation(mask: np.ndarray, mode: AnnotationType | str, seed: int = 0) -> np.ndarray:
    """Coarsen a region mask.

    ``accurate`` returns it unchanged, ``bbox`` fills the tight box of every
    connected component, ``random_patch`` drops rectangles of matching count
    and total area at uniformly random positions, ``whole_image`` marks every
    pixel.
    """
    mode = AnnotationType(mode)
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if mode is AnnotationType.ACCURATE:
        return mask.copy()
    if mode is AnnotationType.BBOX:
        return boxes_to_mask(component_boxes(mask), mask.shape)
    if mode is AnnotationType.RANDOM_PATCH:
        return _random_patches(mask, np.random.default_rng(seed))
    if mode is AnnotationType.WHOLE_IMAGE:
        return np.ones_like(mask)
    raise ValueError(f"cannot degrade to annotation type {mode.value!r}")


def degrade_dataset(data: MixedAnnotationDataset, mode: AnnotationType | str, seed: int = 0) -> MixedAnnotationDataset:
    """Apply ``degrade_annotation`` to every annotated diseased sample.

    Normal samples keep their empty masks: a normal image has no suspect
    region under any annotation style.
    """
    mode = AnnotationType(mode)
    out = []
    for i, s in enumerate(data.samples):
        if s.annotated and s.label == DISEASED:
            s = replace(s, mask=degrade_annotation(s.mask, mode, seed=seed * 1_000_003 + i), annotation_type=mode)
        elif s.annotated:
            s = replace(s, annotation_type=mode)
        out.append(s)
    return replace(data, samples=out)


# ---------------------------------------------------------------------------
# synthetic phantoms


@dataclass(frozen=True)
class PhantomConfig:
    """Layered, speckled stand-in images with dark elliptical lesions.

    Both lesion semi-axes are drawn from ``blob_axis_range`` unless
    ``blob_aspect_range`` is set; then the major semi-axis comes from
    ``blob_axis_range`` and the minor one is the major divided by an
    aspect ratio drawn from ``blob_aspect_range``.
    ``thickening`` widens the layer band of diseased samples by that fraction,
    a diffuse class cue alongside the lesions themselves.
    """

    image_size: int = 96
    n_layers: int = 4
    blob_count_range: tuple[int, int] = (1, 2)
    blob_axis_range: tuple[float, float] = (7.0, 14.0)
    speckle_sigma: float = 0.2
    class_balance: float = 0.5
    band_fraction: float = 0.5
    thickening: float = 0.15
    lesion_contrast_range: tuple[float, float] = (0.1, 0.25)
    blob_aspect_range: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "blob_count_range", tuple(int(v) for v in self.blob_count_range))
        object.__setattr__(self, "blob_axis_range", tuple(float(v) for v in self.blob_axis_range))
        object.__setattr__(self, "lesion_contrast_range", tuple(float(v) for v in self.lesion_contrast_range))
        if self.blob_aspect_range is not None:
            object.__setattr__(self, "blob_aspect_range", tuple(float(v) for v in self.blob_aspect_range))
            plo, phi = self.blob_aspect_range
            if not 1.0 <= plo <= phi:
                raise ValueError(f"invalid blob_aspect_range {self.blob_aspect_range}")
        lo, hi = self.blob_count_range
        alo, ahi = self.blob_axis_range
        if self.image_size < 8:
            raise ValueError("image_size too small")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid blob_count_range {self.blob_count_range}")
        if not 1.0 <= alo <= ahi:
            raise ValueError(f"invalid blob_axis_range {self.blob_axis_range}")
        if self.speckle_sigma < 0:
            raise ValueError("speckle_sigma must be >= 0")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must lie in (0, 1)")
        if not 0.0 < self.band_fraction <= 1.0:
            raise ValueError("band_fraction must lie in (0, 1]")
        clo, chi = self.lesion_contrast_range
        if not 0.0 <= clo <= chi <= 1.0:
            raise ValueError("lesion_contrast_range must satisfy 0 <= lo <= hi <= 1")
        if self.thickening < 0:
            raise ValueError("thickening must be >= 0")
        if round(self.max_band_height * (1.0 + self.thickening)) > self.image_size - 4:
            raise ValueError("thickened band does not fit in the image")
        if 2 * math.ceil(ahi) + 3 > self.min_band_height:
            raise ValueError(
                f"blobs with semi-axis up to {ahi} do not fit in a {self.min_band_height}-row band "
                f"of a {self.image_size}-pixel image"
            )

    @property
    def min_band_height(self) -> int:
        return int(round(self.band_fraction * self.image_size * 0.9))

    @property
    def max_band_height(self) -> int:
        return int(round(self.band_fraction * self.image_size))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PhantomConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> PhantomConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _render_phantom(config: PhantomConfig, label: int, rng: np.random.Generator):
    S = config.image_size
    height = int(rng.integers(config.min_band_height, config.max_band_height + 1))
    if label == DISEASED:
        height = int(round(height * (1.0 + config.thickening)))
    top = int(rng.integers(2, S - height - 1))
    bottom = top + height

    image = np.full((S, S), 0.04, dtype=np.float64)
    cuts = np.sort(rng.choice(np.arange(top + 2, bottom - 1), size=config.n_layers - 1, replace=False))
    edges = [top, *cuts.tolist(), bottom]
    for a, b in zip(edges[:-1], edges[1:]):
        image[a:b] = rng.uniform(0.45, 0.9)
    image = ndimage.gaussian_filter1d(image, sigma=1.0, axis=0)
    image[:top] = 0.04
    image[bottom:] = 0.04

    mask = np.zeros((S, S), dtype=np.uint8)
    blobs = []
    if label == DISEASED:
        yy, xx = np.mgrid[0:S, 0:S]
        lo, hi = config.blob_count_range
        for _ in range(int(rng.integers(lo, hi + 1))):
            if config.blob_aspect_range is None:
                a, b = rng.uniform(*config.blob_axis_range, size=2)
            else:
                a = rng.uniform(*config.blob_axis_range)
                b = max(a / rng.uniform(*config.blob_aspect_range), 1.0)
            theta = rng.uniform(0.0, math.pi)
            reach = math.ceil(max(a, b)) + 1
            cy = rng.uniform(top + reach, bottom - reach)
            cx = rng.uniform(reach, S - reach)
            dy, dx = yy - cy, xx - cx
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            mask[inside] = 1
            blobs.append((float(cy), float(cx), float(a), float(b), float(theta)))
        image[mask > 0] *= rng.uniform(*config.lesion_contrast_range)

    if config.speckle_sigma > 0:
        image = image * (1.0 + config.speckle_sigma * rng.standard_normal(image.shape))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, mask, {"band": (top, bottom), "blobs": blobs}


def generate_phantom_dataset(
    config: PhantomConfig, counts: Mapping[str, int] | Sequence[int], seed: int
) -> DatasetSplit:
    """Deterministic synthetic split; every sample carries its full mask.

    Each sample draws from its own generator seeded by (seed, split, index),
    so output does not depend on generation order.
    """
    if not isinstance(counts, Mapping):
        counts = dict(zip(("train", "validation", "test"), counts))
    parts = {}
    for k, name in enumerate(("train", "validation", "test")):
        n = int(counts.get(name, 0))
        if n < 0 or (name == "train" and n == 0):
            raise ValueError(f"invalid count for {name}: {n}")
        n_diseased = int(math.floor(n * config.class_balance + 0.5))
        labels = np.array([DISEASED] * n_diseased + [NORMAL] * (n - n_diseased))
        labels = np.random.default_rng([seed, k]).permutation(labels)
        samples = []
        for i, label in enumerate(labels):
            image, mask, meta = _render_phantom(config, int(label), np.random.default_rng([seed, k, i]))
            samples.append(
                AnnotatedSample(image, int(label), mask, AnnotationType.ACCURATE, f"{name}-{i:05d}", meta)
            )
        parts[name] = samples
    total = sum(len(v) for v in parts.values())
    ratio = tuple(100.0 * len(parts[n]) / total for n in ("train", "validation", "test"))
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], ratio)


# ---------------------------------------------------------------------------
# on-disk datasets

MANIFEST_COLUMNS = ("sample_id", "split", "label", "image_path", "mask_path")


def read_image(path) -> np.ndarray:
    """Grayscale PNG (8 or 16 bit) scaled to [0, 1]."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64)
            scale = 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
            scale = 255.0
    return np.clip(arr / scale, 0.0, 1.0).astype(np.float32)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img) > 0).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def parse_label(value: str) -> int:
    try:
        return _LABEL_NAMES[value.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown label {value!r}") from None


def load_dataset(root, manifest) -> DatasetSplit:
    """Read a CSV manifest (``sample_id,split,label,image_path,mask_path``).

    Paths are relative to ``root``; an empty ``mask_path`` leaves the sample
    unannotated.
    """
    root = Path(root)
    parts: dict[str, list[AnnotatedSample]] = {"train": [], "validation": [], "test": []}
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = set(MANIFEST_COLUMNS) - {"mask_path"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"manifest header must contain {sorted(required)}")
        for row in reader:
            sid = row["sample_id"]
            split = row["split"].strip().lower()
            if split == "val":
                split = "validation"
            if split not in parts:
                raise ValueError(f"{sid}: unknown split {row['split']!r}")
            label = parse_label(row["label"])
            image = read_image(root / row["image_path"])
            mask_path = (row.get("mask_path") or "").strip()
            mask = None
            if mask_path:
                mask = read_mask(root / mask_path)
                if mask.shape != image.shape:
                    raise ValueError(f"{sid}: mask shape {mask.shape} does not match image shape {image.shape}")
            kind = AnnotationType.ACCURATE if mask is not None else AnnotationType.NONE
            parts[split].append(AnnotatedSample(image, label, mask, kind, sid))
    n = sum(len(v) for v in parts.values())
    if n == 0:
        raise ValueError("manifest lists no samples")
    ratio = tuple(100.0 * len(parts[k]) / n for k in ("train", "validation", "test"))
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], ratio)


def write_dataset(split: DatasetSplit, root) -> Path:
    """Write images, masks and ``manifest.csv`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for name, samples in split.parts().items():
            for s in samples:
                image_rel = f"images/{s.sample_id}.png"
                write_image(root / image_rel, s.image)
                mask_rel = ""
                if s.mask is not None:
                    mask_rel = f"masks/{s.sample_id}.png"
                    write_mask(root / mask_rel, s.mask)
                writer.writerow([s.sample_id, name, s.label, image_rel, mask_rel])
    return manifest
