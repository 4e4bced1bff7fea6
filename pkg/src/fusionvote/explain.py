"""Grad-CAM heatmaps over the CNN-stream feature maps of a fusion model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import resize_nearest, write_pgm, write_ppm
from .errors import ConfigurationError, ContractError
from .model import CNNStream, FusionModel
from .tensor import Tensor


@dataclass
class AttentionMap:
    values: np.ndarray
    target_layer: str
    target_class: int
    all_zero: bool
    upsampled: np.ndarray | None = None


def spatial_layers(model: FusionModel) -> list[str]:
    return [f"cnn{i}.{name}" for i in range(len(model.cstreams)) for name in CNNStream.SPATIAL_LAYERS]


def _resolve_layer(model: FusionModel, layer_name: str) -> str:
    valid = spatial_layers(model)
    key = layer_name if "." in layer_name else f"cnn0.{layer_name}"
    if key not in valid:
        raise ConfigurationError(f"{layer_name!r} is not a spatial CNN-stream layer; valid layers: {', '.join(valid)}")
    return key


def cam_from_activations(acts: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, bool]:
    """``relu(sum_c mean(grad_c) * A_c)`` divided by its max; all-zero maps are returned as zeros and flagged."""
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    peak = cam.max()
    if peak <= 0:
        return np.zeros_like(cam), True
    return cam / peak, False


def grad_cam(model: FusionModel, img, target_class: int, layer_name: str = "se",
             upsample: bool = True) -> AttentionMap:
    """Grad-CAM map for ``target_class`` at a CNN-stream layer (default: SE-block output).

    ``img`` is a preprocessed ``C×H×W`` image (array or tensor). The model is
    put in inference mode and its parameter gradients are cleared afterwards.
    """
    key = _resolve_layer(model, layer_name)
    if not 0 <= target_class < model.num_classes:
        raise ContractError(f"target class {target_class} outside [0, {model.num_classes})")
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
    x = T.Tensor(data[None], requires_grad=True, dtype=data.dtype)
    model.eval()
    taps: dict[str, Tensor] = {}
    logits = model(x, taps)
    feat = taps[key].retain_grad()
    T.backward(logits[0, target_class])
    acts = feat.data[0].astype(np.float64)
    grads = feat.grad[0].astype(np.float64)
    model.zero_grad()
    values, all_zero = cam_from_activations(acts, grads)
    up = resize_nearest(values, data.shape[-2], data.shape[-1]) if upsample else None
    return AttentionMap(values, key, target_class, all_zero, up)


def map_to_gray(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0, 1) * 255).astype(np.uint8)


def overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Input and a 50/50 blend with a red heat channel, side by side (``H×2W×3`` uint8)."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = map_to_gray(image)
    red = np.zeros_like(image)
    red[:, :, 0] = map_to_gray(heat)
    blend = np.round(0.5 * image.astype(np.float64) + 0.5 * red).astype(np.uint8)
    return np.concatenate([image, blend], axis=1)


def write_attention(amap: AttentionMap, image: np.ndarray, prefix) -> list[Path]:
    """Write ``<prefix>.pgm`` (map at input size when available) and ``<prefix>_overlay.ppm``."""
    prefix = Path(prefix)
    grid = amap.upsampled if amap.upsampled is not None else amap.values
    pgm = prefix.with_name(prefix.name + ".pgm")
    write_pgm(pgm, map_to_gray(grid))
    paths = [pgm]
    if amap.upsampled is not None:
        ppm = prefix.with_name(prefix.name + "_overlay.ppm")
        write_ppm(ppm, overlay(image, amap.upsampled))
        paths.append(ppm)
    return paths
