"""CAM heatmaps, ROI binarisation, patch-level ROI search and overlay export."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from roicam.data import component_boxes
from roicam.network import CamNetwork

Box = tuple[int, int, int, int]


@dataclass
class Heatmap:
    """Class evidence at image resolution, min-max normalised to [0, 1].

    ``raw`` is the 6x6 weighted channel sum before upsampling. ``vmin`` and
    ``vmax`` are the extrema used for normalisation. A heatmap is
    ``degenerate`` when it carried no spatial contrast at all.
    """

    values: np.ndarray
    raw: np.ndarray | None = None
    vmin: float = 0.0
    vmax: float = 1.0
    degenerate: bool = False
    source_class: int = 1


@dataclass
class RoiPrediction:
    mask: np.ndarray
    components: list[Box] = field(default_factory=list)
    threshold_used: float = 0.5
    degenerate: bool = False


def raw_cam(cam_net: CamNetwork, images) -> torch.Tensor:
    """``sum_k w_k f_k(x, y)`` over the bottleneck channels, bias excluded; ``[N, 6, 6]``."""
    with torch.no_grad():
        feats = cam_net.features(images)
        w = cam_net.cam_dense.weight[0]
        return torch.einsum("k,nkhw->nhw", w, feats)


def _normalise(up: np.ndarray, raw: np.ndarray) -> Heatmap:
    vmin, vmax = float(up.min()), float(up.max())
    if not vmax > vmin or float(raw.max()) == float(raw.min()):
        return Heatmap(np.zeros_like(up), raw, vmin, vmax, degenerate=True)
    return Heatmap((up - vmin) / (vmax - vmin), raw, vmin, vmax)


def compute_cams(cam_net: CamNetwork, images) -> list[Heatmap]:
    size = cam_net.config.input_size
    raw = raw_cam(cam_net, images)
    up = F.interpolate(raw[:, None], size=(size, size), mode="bilinear", align_corners=False)[:, 0]
    raw_np = raw.numpy().astype(np.float64)
    up_np = up.numpy().astype(np.float64)
    return [_normalise(u, r) for u, r in zip(up_np, raw_np)]


def compute_cam(cam_net: CamNetwork, image) -> Heatmap:
    """Bilinearly upsampled, min-max normalised CAM of the diseased class for one image."""
    image = torch.as_tensor(image, dtype=torch.float32)
    if image.ndim != 2:
        raise ValueError(f"expected a single 2-D image, got shape {tuple(image.shape)}")
    return compute_cams(cam_net, image[None])[0]


def binarize_heatmap(h: Heatmap | np.ndarray, tau: float = 0.5) -> RoiPrediction:
    """Threshold at ``tau`` and list the 4-connected components with their boxes."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if not isinstance(h, Heatmap):
        h = Heatmap(np.asarray(h, dtype=np.float64))
    if h.degenerate:
        return RoiPrediction(np.zeros(h.values.shape, dtype=np.uint8), [], tau, degenerate=True)
    mask = (h.values >= tau).astype(np.uint8)
    return RoiPrediction(mask, component_boxes(mask), tau)


def roi_from_image(cam_net: CamNetwork, image, tau: float = 0.5) -> RoiPrediction:
    return binarize_heatmap(compute_cam(cam_net, image), tau)


def _as_classifier(model) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(model, torch.nn.Module):
        size = model.config.input_size

        def classify(patches: torch.Tensor) -> torch.Tensor:
            if patches.shape[-1] != size or patches.shape[-2] != size:
                patches = F.interpolate(patches[:, None], size=(size, size), mode="bilinear", align_corners=False)[:, 0]
            with torch.no_grad():
                return model(patches)

        return classify
    return lambda patches: torch.as_tensor(model(patches))


def patch_inference(
    model,
    large_image,
    patch_size: int,
    stride: int | None = None,
    prob_threshold: float = 0.5,
    batch_size: int = 64,
) -> RoiPrediction:
    """Slide a square window over ``large_image``; positive patches form the ROI.

    ``model`` is a network (patches are resized to its input size) or any
    callable mapping a ``[N, p, p]`` tensor to ``N`` probabilities.
    """
    img = torch.as_tensor(np.asarray(large_image), dtype=torch.float32)
    H, W = img.shape
    if patch_size > H or patch_size > W:
        raise ValueError(f"patch size {patch_size} exceeds image shape {(H, W)}")
    stride = stride or patch_size
    classify = _as_classifier(model)
    corners = [(r, c) for r in range(0, H - patch_size + 1, stride) for c in range(0, W - patch_size + 1, stride)]
    mask = np.zeros((H, W), dtype=np.uint8)
    for i in range(0, len(corners), batch_size):
        chunk = corners[i : i + batch_size]
        patches = torch.stack([img[r : r + patch_size, c : c + patch_size] for r, c in chunk])
        probs = np.asarray(classify(patches), dtype=np.float64).reshape(-1)
        for (r, c), p in zip(chunk, probs):
            if p >= prob_threshold:
                mask[r : r + patch_size, c : c + patch_size] = 1
    return RoiPrediction(mask, component_boxes(mask), prob_threshold)


PRED_COLOR = (0, 255, 0)
TRUTH_COLOR = (255, 0, 0)


def _heat_colors(values: np.ndarray) -> np.ndarray:
    # Blue -> yellow ramp; avoids pure red/green so box colours stay unambiguous.
    v = np.clip(values, 0.0, 1.0)[..., None]
    lo = np.array([30.0, 40.0, 160.0])
    hi = np.array([250.0, 220.0, 40.0])
    return lo + v * (hi - lo)


def render_overlay(
    image: np.ndarray,
    heatmap: Heatmap | None = None,
    predicted: RoiPrediction | None = None,
    truth_mask: np.ndarray | None = None,
    alpha: float = 0.4,
) -> Image.Image:
    """Grayscale image with the heatmap blended in, predicted boxes green and ground truth red."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=2)
    if heatmap is not None and not heatmap.degenerate:
        rgb = (1.0 - alpha) * rgb + alpha * _heat_colors(heatmap.values)
    out = Image.fromarray(np.round(rgb).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(out)
    if truth_mask is not None:
        for t, l, b, r in component_boxes(truth_mask):
            draw.rectangle([l, t, r - 1, b - 1], outline=TRUTH_COLOR)
    if predicted is not None:
        for t, l, b, r in predicted.components:
            draw.rectangle([l, t, r - 1, b - 1], outline=PRED_COLOR)
    return out
