"""Synthetic corpora with controlled class overlap.

The Gaussian embedding corpus drives the shot-sweep benchmark: class means
sit on random unit directions scaled by `separation`, each item drifts from
its class mean by `item_sigma`, and each activation vector adds `loc_sigma`
location noise. The defaults are calibrated so that mean AUC climbs with the
shot count and saturates above 0.95 by 64 shots per class.

Texture image corpora (flat Gaussian pixel noise around a class-specific
gray level) feed the planted-quadrant heat map tests through the grid
projection backbone.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import CorpusItem, EmbeddingSet, LabeledCorpus, load_corpus
from .errors import DataError

# calibrated defaults for the shot-sweep benchmark
SEPARATION = 1.0
ITEM_SIGMA = 0.45
LOC_SIGMA = 0.8
EVAL_D_PCA = 16
EVAL_N_WORDS = 32


def make_gaussian_corpus(
    n_classes: int = 3,
    per_class: int = 200,
    d_latent: int = 32,
    n_locations: int = 4,
    seed: int = 0,
    separation: float = SEPARATION,
    item_sigma: float = ITEM_SIGMA,
    loc_sigma: float = LOC_SIGMA,
) -> LabeledCorpus:
    """Labeled corpus of synthetic EmbeddingSets with controlled overlap."""
    if n_classes < 2:
        raise DataError(f"need >= 2 classes, got {n_classes}")
    if per_class < 2:
        raise DataError(f"need >= 2 items per class, got {per_class}")
    if d_latent < n_classes:
        raise DataError(f"d_latent {d_latent} must be >= n_classes {n_classes}")
    rng = np.random.default_rng(seed)
    # regular simplex: every class pair sits at the same distance, so all
    # binary scenarios share one difficulty level
    means = np.zeros((n_classes, d_latent))
    means[:, :n_classes] = np.eye(n_classes) - 1.0 / n_classes
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    items: list[CorpusItem] = []
    width = len(str(per_class - 1))
    for c in range(n_classes):
        for i in range(per_class):
            center = means[c] + rng.normal(scale=item_sigma, size=d_latent)
            vectors = center + rng.normal(scale=loc_sigma, size=(n_locations, d_latent))
            item_id = f"class_{c}/item_{i:0{width}d}"
            items.append(CorpusItem(item_id, c, EmbeddingSet(vectors.astype(np.float32), item_id)))
    return LabeledCorpus(items, [f"class_{c}" for c in range(n_classes)])


def make_texture_image(
    rng: np.random.Generator,
    mean: float,
    sigma: float = 0.08,
    size: int = 224,
) -> np.ndarray:
    """Flat noise texture in [0,1], shape (size, size, 3)."""
    return np.clip(rng.normal(loc=mean, scale=sigma, size=(size, size, 3)), 0.0, 1.0)


def write_texture_corpus(
    root: str | Path,
    class_means: list[float],
    per_class: int = 12,
    sigma: float = 0.08,
    size: int = 224,
    seed: int = 0,
) -> LabeledCorpus:
    """Write one PNG folder per class of flat-noise textures and load it back."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c, mean in enumerate(class_means):
        cdir = root / f"tex_{c}"
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = make_texture_image(rng, mean, sigma=sigma, size=size)
            save_image(img, cdir / f"img_{i:03d}.png")
    return load_corpus(root, format="image_folders")


def make_planted_image(
    background_mean: float,
    target_mean: float,
    quadrant: tuple[int, int] = (0, 0),
    sigma: float = 0.08,
    size: int = 224,
    seed: int = 0,
) -> np.ndarray:
    """Background texture with one quadrant drawn from the target class's
    distribution. quadrant is (row, col) in a 2x2 layout."""
    rng = np.random.default_rng(seed)
    img = make_texture_image(rng, background_mean, sigma=sigma, size=size)
    half = size // 2
    qr, qc = quadrant
    patch = make_texture_image(rng, target_mean, sigma=sigma, size=size)[: half, : half]
    img[qr * half : (qr + 1) * half, qc * half : (qc + 1) * half] = patch
    return img


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Save a [0,1] float (H, W, 3) array as PNG."""
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)
