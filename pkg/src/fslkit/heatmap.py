"""Patch-grid attention maps: score every image patch by its Mahalanobis
distance to a chosen class signature and render a color overlay.

Smaller distance means the patch looks more like the target class, so it
renders hotter. Values are min-max normalized per image; raw values go to
the JSON sidecar for cross-image comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dictionary import mahalanobis
from .errors import DataError
from .pipeline import FittedModel


@dataclass(frozen=True)
class Patch:
    row: int
    col: int
    y: int  # pixel origin (top)
    x: int  # pixel origin (left)
    pixels: np.ndarray  # (patch, patch, channels), same value domain as the source tensor


@dataclass(frozen=True)
class HeatmapGrid:
    rows: int
    cols: int
    patch_size: int
    stride: int
    values: np.ndarray  # (rows, cols) raw distances
    normalization: tuple[float, float]  # (min, max) used for coloring

    def __post_init__(self):
        if self.values.shape != (self.rows, self.cols):
            raise DataError(f"grid shape {self.values.shape} != ({self.rows}, {self.cols})")
        if self.rows * self.cols < 1:
            raise DataError("empty heat map grid")
        if not np.all(np.isfinite(self.values)):
            raise DataError("non-finite heat map values")

    def normalized(self) -> np.ndarray:
        """Distances scaled to [0,1]; a constant grid maps to mid-scale 0.5."""
        lo, hi = self.normalization
        if hi - lo < 1e-12:
            return np.full_like(self.values, 0.5)
        return (self.values - lo) / (hi - lo)

    def heat(self) -> np.ndarray:
        """Hotness in [0,1]: 1 at the smallest distance."""
        return 1.0 - self.normalized()

    def argmin_cell(self) -> tuple[int, int]:
        flat = int(np.argmin(self.values))
        return flat // self.cols, flat % self.cols

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "values": [[float(v) for v in row] for row in self.values],
            "normalization": {"min": float(self.normalization[0]), "max": float(self.normalization[1]),
                              "scheme": "minmax"},
        }


def grid_shape(height: int, width: int, patch_size: int, stride: int) -> tuple[int, int]:
    return (height - patch_size) // stride + 1, (width - patch_size) // stride + 1


def patch_grid(image: np.ndarray, patch_size: int, stride: int) -> list[Patch]:
    """Row-major sliding-window patches of a (H, W, C) tensor."""
    if image.ndim != 3:
        raise DataError(f"expected (H, W, C) tensor, got shape {image.shape}")
    h, w, _ = image.shape
    if patch_size > h or patch_size > w:
        raise DataError(f"patch size {patch_size} exceeds image size {h}x{w}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    rows, cols = grid_shape(h, w, patch_size, stride)
    patches = []
    for r in range(rows):
        for c in range(cols):
            y, x = r * stride, c * stride
            patches.append(Patch(r, c, y, x, image[y : y + patch_size, x : x + patch_size, :].copy()))
    return patches


def resize_tensor(tensor: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float (H, W, C) tensor, channel by channel."""
    h, w = size
    if tensor.shape[:2] == (h, w):
        return tensor
    channels = []
    for c in range(tensor.shape[2]):
        im = Image.fromarray(tensor[:, :, c].astype(np.float32), mode="F")
        channels.append(np.asarray(im.resize((w, h), Image.Resampling.BILINEAR), dtype=np.float64))
    return np.stack(channels, axis=-1)


def score_patches(patches: list[Patch], model: FittedModel, target_class: int) -> HeatmapGrid:
    """Minimum Mahalanobis distance of each patch to the target class's
    sub-centroids. Patches are upscaled to the backbone input size first."""
    if model.backbone is None:
        raise DataError("model has no attached backbone; load with attach_backbone=True")
    if not patches:
        raise DataError("no patches")
    sig = model.dictionary.signature_for(target_class)
    rows = max(p.row for p in patches) + 1
    cols = max(p.col for p in patches) + 1
    values = np.full((rows, cols), np.nan)
    h, w, _ = model.backbone.input_spec
    for p in patches:
        try:
            tensor = resize_tensor(p.pixels, (h, w))
            emb = model.backbone.embed_tensor(tensor, source_id=f"patch_{p.row}_{p.col}")
            signature = model.encoder.encode(emb)
            values[p.row, p.col] = float(mahalanobis(signature, sig).min())
        except DataError as exc:
            raise DataError(f"patch ({p.row}, {p.col}): {exc}") from exc
    if np.any(np.isnan(values)):
        raise DataError("patch grid has holes; patches must tile a full row-major grid")
    patch_size = patches[0].pixels.shape[0]
    with_offset = [p for p in patches if p.x > 0 or p.y > 0]
    stride = min(max(p.x, p.y) for p in with_offset) if with_offset else patch_size
    return HeatmapGrid(
        rows=rows,
        cols=cols,
        patch_size=patch_size,
        stride=stride,
        values=values,
        normalization=(float(values.min()), float(values.max())),
    )


def hot_colormap(heat: np.ndarray) -> np.ndarray:
    """Red-hot ramp black -> red -> yellow -> white, shape (..., 3) in [0,1]."""
    h = np.clip(heat, 0.0, 1.0)
    return np.stack(
        [np.clip(3.0 * h, 0, 1), np.clip(3.0 * h - 1.0, 0, 1), np.clip(3.0 * h - 2.0, 0, 1)],
        axis=-1,
    )


def render(grid: HeatmapGrid, base_image: np.ndarray, alpha: float) -> np.ndarray:
    """Alpha-blend the patch heat colors over the grayscale base.

    base_image: (H, W, C) or (H, W) with values in [0,1] (pass raw pixels,
    not standardized ones). Returns an RGBA uint8 array; every pixel takes
    the color of the patch cell whose center is nearest.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha must be in [0,1], got {alpha}")
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim == 3:
        gray = base.mean(axis=2)
    else:
        gray = base
    gray = np.clip(gray, 0.0, 1.0)
    h, w = gray.shape

    heat = grid.heat()
    ys = np.arange(h)
    xs = np.arange(w)
    half = grid.patch_size / 2.0
    stride = max(grid.stride, 1)
    row_idx = np.clip(np.floor((ys - half) / stride + 0.5).astype(int), 0, grid.rows - 1)
    col_idx = np.clip(np.floor((xs - half) / stride + 0.5).astype(int), 0, grid.cols - 1)
    heat_img = heat[np.ix_(row_idx, col_idx)]

    overlay = hot_colormap(heat_img)
    base_rgb = np.repeat(gray[:, :, None], 3, axis=2)
    blended = (1.0 - alpha) * base_rgb + alpha * overlay
    rgba = np.empty((h, w, 4), dtype=np.uint8)
    rgba[:, :, :3] = np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgba[:, :, 3] = 255
    return rgba


def save_png(rgba: np.ndarray, path: str | Path) -> None:
    Image.fromarray(rgba, mode="RGBA").save(path, format="PNG")


def write_heatmap_json(grid: HeatmapGrid, path: str | Path, extra: dict | None = None) -> None:
    doc = grid.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
