"""Signature encoder: PCA reduction, k-means vocabulary, vocabulary pooling.

An image's latent activation vectors are centered and projected by a fitted
PCA, scored against every vocabulary word by inner product, and the scores
are mean-pooled over locations and L2-normalized into the image signature.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import EmbeddingSet
from .errors import DataError, NumericalError
from . import formats

log = logging.getLogger(__name__)

ORTHONORMALITY_TOL = 1e-8
EIGENVALUE_CLAMP = 1e-10
ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class PcaTransform:
    """Centering vector plus row-orthonormal principal directions.

    components has shape (d_pca, d_latent); eigenvalues are the matching
    sample variances, sorted non-increasing.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        d_pca, d_latent = self.components.shape
        if self.mean.shape != (d_latent,):
            raise DataError(f"mean shape {self.mean.shape} does not match components {self.components.shape}")
        if self.eigenvalues.shape != (d_pca,):
            raise DataError("one eigenvalue per component required")
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(d_pca), atol=ORTHONORMALITY_TOL):
            raise NumericalError("PCA components are not row-orthonormal")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise NumericalError("PCA eigenvalues must be non-increasing")
        if np.any(self.eigenvalues < 0):
            raise NumericalError("negative PCA eigenvalue after clamping")

    @property
    def d_pca(self) -> int:
        return self.components.shape[0]

    @property
    def d_latent(self) -> int:
        return self.components.shape[1]

    def transform(self, vectors: np.ndarray) -> np.ndarray:
        """Project (n, d_latent) rows into the reduced space, shape (n, d_pca)."""
        return (np.asarray(vectors, dtype=np.float64) - self.mean) @ self.components.T


@dataclass(frozen=True)
class Vocabulary:
    """k-means centroids ('words') in the PCA-reduced space, shape (n_words, d_pca)."""

    words: np.ndarray

    def __post_init__(self):
        if self.words.ndim != 2 or self.words.shape[0] < 2:
            raise DataError(f"vocabulary needs >= 2 words, got shape {self.words.shape}")
        if not np.all(np.isfinite(self.words)):
            raise NumericalError("vocabulary contains non-finite entries")
        uniq = np.unique(self.words, axis=0)
        if uniq.shape[0] != self.words.shape[0]:
            raise NumericalError("vocabulary contains duplicate words")

    @property
    def n_words(self) -> int:
        return self.words.shape[0]

    @property
    def d_pca(self) -> int:
        return self.words.shape[1]


@dataclass(frozen=True)
class ImageSignature:
    """L2-normalized pooled vocabulary response of one image."""

    r: np.ndarray
    source_id: str

    def __post_init__(self):
        norm = float(np.linalg.norm(self.r))
        if norm > ZERO_NORM_EPS and abs(norm - 1.0) > 1e-9:
            raise NumericalError(f"signature '{self.source_id}' norm {norm} is neither ~1 nor ~0")


def fit_pca(samples: np.ndarray, d_pca: int) -> PcaTransform:
    """Top-d_pca eigendecomposition of the sample covariance (1/(n-1)).

    Sign convention: the largest-magnitude entry of each component is
    positive. Raises when n <= d_pca or the covariance rank is below d_pca.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise DataError(f"samples must be 2-D, got shape {samples.shape}")
    n, d_latent = samples.shape
    if d_pca < 1:
        raise DataError(f"d_pca must be >= 1, got {d_pca}")
    if n <= d_pca:
        raise DataError(f"need more samples ({n}) than components ({d_pca})")
    if d_pca > d_latent:
        raise DataError(f"d_pca={d_pca} exceeds latent dimension {d_latent}")
    if not np.all(np.isfinite(samples)):
        raise DataError("samples contain non-finite values")

    mean = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    if np.any(eigvals < -EIGENVALUE_CLAMP):
        raise NumericalError(f"covariance eigenvalue {eigvals.min()} below clamp threshold")
    eigvals = np.maximum(eigvals, 0.0)

    rank_tol = eigvals[0] * d_latent * np.finfo(np.float64).eps if eigvals[0] > 0 else 0.0
    rank = int(np.sum(eigvals > rank_tol))
    if rank < d_pca:
        raise NumericalError(f"covariance rank {rank} < d_pca={d_pca}; reduce d_pca")

    components = eigvecs[:, :d_pca].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaTransform(mean=mean, components=components, eigenvalues=eigvals[:d_pca].copy())


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, shape (n_points, n_centroids)."""
    sq = (
        np.sum(points**2, axis=1)[:, None]
        + np.sum(centroids**2, axis=1)[None, :]
        - 2.0 * points @ centroids.T
    )
    return np.maximum(sq, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: per step, draw several D^2-weighted candidates and
    keep the one that lowers the total potential the most."""
    n = points.shape[0]
    n_candidates = 2 + int(np.log(k))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dsq = _squared_distances(points, points[chosen[:1]])[:, 0]
    for i in range(1, k):
        total = dsq.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid; fall back to uniform
            probs = np.full(n, 1.0 / n)
        else:
            probs = dsq / total
        candidates = rng.choice(n, size=n_candidates, p=probs)
        cand_dsq = np.minimum(dsq[:, None], _squared_distances(points, points[candidates]))
        best = int(np.argmin(cand_dsq.sum(axis=0)))
        chosen[i] = candidates[best]
        dsq = cand_dsq[:, best]
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int) -> KMeansResult:
    k = centroids.shape[0]
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        dsq = _squared_distances(points, centroids)
        new_labels = np.argmin(dsq, axis=1)
        point_dsq = dsq[np.arange(points.shape[0]), new_labels]

        # repair empty clusters by reseeding each to the current farthest point
        empties = [c for c in range(k) if not np.any(new_labels == c)]
        for c in empties:
            far = int(np.argmax(point_dsq))
            centroids[c] = points[far]
            new_labels[far] = c
            point_dsq[far] = 0.0

        history.append(float(point_dsq.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
    dsq = _squared_distances(points, centroids)
    labels = np.argmin(dsq, axis=1)
    inertia = float(dsq[np.arange(points.shape[0]), labels].sum())
    return KMeansResult(centroids=centroids, labels=labels, inertia=inertia,
                        inertia_history=history, n_iter=n_iter)


def kmeans(
    points: np.ndarray,
    k: int,
    seed,
    max_iters: int = 100,
    n_init: int = 4,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of n_init restarts.

    Deterministic for a fixed seed: restart r uses rng seed (seed, r).
    Convergence is declared when assignments stabilize.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError(f"points must be 2-D, got shape {points.shape}")
    m = points.shape[0]
    if m < k:
        raise DataError(f"cannot fit {k} clusters to {m} points")
    if not np.all(np.isfinite(points)):
        raise DataError("points contain non-finite values")
    best: KMeansResult | None = None
    base = seed if isinstance(seed, (tuple, list)) else (seed,)
    # restarts are cheap on small instances and make the optimum reliable there
    restarts = max(1, n_init) if m > 64 else max(n_init, 16)
    for r in range(restarts):
        rng = np.random.default_rng((*base, r))
        init = _kmeans_pp_init(points, k, rng)
        result = _lloyd(points, init, max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def fit_vocabulary(
    reduced: np.ndarray,
    n_words: int,
    seed,
    max_iters: int = 100,
    n_init: int = 4,
) -> Vocabulary:
    """Cluster PCA-reduced support activations into the vocabulary words."""
    if n_words < 2:
        raise DataError(f"n_words must be >= 2, got {n_words}")
    result = kmeans(reduced, n_words, seed=seed, max_iters=max_iters, n_init=n_init)
    return Vocabulary(words=result.centroids)


def encode(
    emb: EmbeddingSet,
    pca: PcaTransform,
    vocab: Vocabulary,
    mode: str = "soft",
) -> ImageSignature:
    """Signature of one image.

    soft (default): inner products of each reduced activation against every
    word, mean-pooled over locations, then L2-normalized. hard: histogram of
    nearest-word assignments, L2-normalized.
    """
    if emb.d_latent != pca.d_latent:
        raise DataError(f"embedding dimension {emb.d_latent} != PCA input dimension {pca.d_latent}")
    if vocab.d_pca != pca.d_pca:
        raise DataError(f"vocabulary dimension {vocab.d_pca} != PCA output dimension {pca.d_pca}")
    reduced = pca.transform(emb.vectors)
    if mode == "soft":
        pooled = (reduced @ vocab.words.T).mean(axis=0)
    elif mode == "hard":
        assignments = np.argmin(_squared_distances(reduced, vocab.words), axis=1)
        pooled = np.bincount(assignments, minlength=vocab.n_words).astype(np.float64)
    else:
        raise DataError(f"unknown encode mode '{mode}'")
    norm = float(np.linalg.norm(pooled))
    if norm < ZERO_NORM_EPS:
        warnings.warn(f"signature of '{emb.source_id}' is all-zero before normalization", RuntimeWarning)
        return ImageSignature(r=np.zeros(vocab.n_words), source_id=emb.source_id)
    return ImageSignature(r=pooled / norm, source_id=emb.source_id)


@dataclass(frozen=True)
class EncoderStack:
    """Fitted PCA plus vocabulary; maps an EmbeddingSet to its signature."""

    pca: PcaTransform
    vocab: Vocabulary
    mode: str = "soft"

    @property
    def n_words(self) -> int:
        return self.vocab.n_words

    def encode(self, emb: EmbeddingSet) -> ImageSignature:
        return encode(emb, self.pca, self.vocab, mode=self.mode)

    def to_sections(self) -> dict[bytes, bytes]:
        # float64: float32 rounding would break the row-orthonormality
        # invariant (1e-8) on reload; the encoder is small either way
        pca_block = formats.pack_block(
            {"d_pca": self.pca.d_pca, "d_latent": self.pca.d_latent},
            {
                "mean": self.pca.mean.astype("<f8"),
                "components": self.pca.components.astype("<f8"),
                "eigenvalues": self.pca.eigenvalues.astype("<f8"),
            },
        )
        vocab_block = formats.pack_block(
            {"n_words": self.vocab.n_words, "mode": self.mode},
            {"words": self.vocab.words.astype("<f8")},
        )
        return {formats.SECTION_PCA: pca_block, formats.SECTION_VOCAB: vocab_block}

    @classmethod
    def from_sections(cls, sections: dict[bytes, bytes]) -> "EncoderStack":
        try:
            pca_meta, pca_arrays = formats.unpack_block(sections[formats.SECTION_PCA])
            vocab_meta, vocab_arrays = formats.unpack_block(sections[formats.SECTION_VOCAB])
        except KeyError as exc:
            raise DataError(f"model file is missing encoder section {exc}") from exc
        pca = PcaTransform(
            mean=pca_arrays["mean"].astype(np.float64),
            components=pca_arrays["components"].astype(np.float64),
            eigenvalues=pca_arrays["eigenvalues"].astype(np.float64),
        )
        vocab = Vocabulary(words=vocab_arrays["words"].astype(np.float64))
        return cls(pca=pca, vocab=vocab, mode=vocab_meta.get("mode", "soft"))
