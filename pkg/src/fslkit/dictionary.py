"""Per-class appearance models: shrunk covariance plus sub-cluster centroids,
and Mahalanobis distances of query signatures against them.

With k supports and n_words-dimensional signatures the raw class covariance
is singular whenever k <= n_words, so shrinkage toward the scaled identity
is applied before factorization:

    cov = (1 - lambda) * S + lambda * (trace(S) / n_words) * I
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .encoder import ImageSignature, kmeans
from .errors import DataError, NumericalError
from . import formats

log = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
ESCALATED_LAMBDA = 0.1


@dataclass(frozen=True)
class ClassSignature:
    """One class's appearance model: sub-centroids, shrunk covariance, cached precision."""

    class_label: int
    centroids: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    shrinkage_lambda: float

    def __post_init__(self):
        p, n_words = self.centroids.shape
        if self.covariance.shape != (n_words, n_words):
            raise DataError(f"covariance shape {self.covariance.shape} != ({n_words}, {n_words})")
        if not np.allclose(self.covariance, self.covariance.T, atol=SYMMETRY_TOL):
            raise NumericalError(f"class {self.class_label}: covariance not symmetric")
        if not 0.0 <= self.shrinkage_lambda <= 1.0:
            raise DataError(f"shrinkage lambda {self.shrinkage_lambda} outside [0,1]")
        eigvals = np.linalg.eigvalsh(self.precision)
        if eigvals.min() <= 0:
            raise NumericalError(f"class {self.class_label}: precision is not positive definite")

    @property
    def p(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_words(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class Dictionary:
    """All class signatures, ordered by class label."""

    signatures: list[ClassSignature]
    p: int
    n_words: int

    def __post_init__(self):
        if not self.signatures:
            raise DataError("dictionary has no class signatures")
        labels = [s.class_label for s in self.signatures]
        if labels != sorted(labels):
            raise DataError("class signatures must be ordered by label")
        for s in self.signatures:
            if s.p != self.p or s.n_words != self.n_words:
                raise DataError(f"class {s.class_label} disagrees on (p, n_words)")

    @property
    def class_labels(self) -> list[int]:
        return [s.class_label for s in self.signatures]

    def signature_for(self, label: int) -> ClassSignature:
        for s in self.signatures:
            if s.class_label == label:
                return s
        raise DataError(f"class {label} not in dictionary")


@dataclass(frozen=True)
class DistanceVector:
    """Mahalanobis distances of one query to every (class, sub-centroid) pair."""

    d: np.ndarray
    query_id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.d)):
            raise NumericalError(f"query '{self.query_id}': non-finite distance")
        if np.any(self.d < 0):
            raise NumericalError(f"query '{self.query_id}': negative distance")


def shrunk_covariance(samples: np.ndarray, lam: float) -> np.ndarray:
    """Sample covariance (1/(n-1)) blended toward its scaled-identity target."""
    raw = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
    dim = raw.shape[0]
    sigma_bar = np.trace(raw) / dim
    return (1.0 - lam) * raw + lam * sigma_bar * np.eye(dim)


def _factorize(cov: np.ndarray):
    try:
        factor = scipy.linalg.cho_factor(cov, lower=True)
    except scipy.linalg.LinAlgError:
        return None
    return factor


def fit_class_signature(
    signatures: np.ndarray,
    class_label: int,
    p: int,
    lam: float,
    seed,
    kmeans_max_iters: int = 100,
    kmeans_n_init: int = 4,
) -> ClassSignature:
    n, n_words = signatures.shape
    if n < 2:
        raise DataError(f"class {class_label}: needs >= 2 support signatures for a covariance, got {n}")
    if n < p:
        raise DataError(f"class {class_label}: {n} support signatures cannot form {p} sub-clusters")

    applied_lam = lam
    cov = shrunk_covariance(signatures, applied_lam)
    factor = _factorize(cov)
    if factor is None and applied_lam < ESCALATED_LAMBDA:
        applied_lam = ESCALATED_LAMBDA
        log.warning("class %d: factorization failed at lambda=%g, escalating to %g",
                    class_label, lam, applied_lam)
        cov = shrunk_covariance(signatures, applied_lam)
        factor = _factorize(cov)
    if factor is None:
        raise NumericalError(
            f"class {class_label}: covariance factorization failed at lambda={applied_lam}; "
            "support signatures may be degenerate"
        )
    precision = scipy.linalg.cho_solve(factor, np.eye(n_words))
    precision = 0.5 * (precision + precision.T)

    if p == 1:
        centroids = signatures.mean(axis=0, keepdims=True)
    else:
        centroids = kmeans(signatures, p, seed=seed,
                           max_iters=kmeans_max_iters, n_init=kmeans_n_init).centroids
    return ClassSignature(
        class_label=class_label,
        centroids=centroids,
        covariance=cov,
        precision=precision,
        shrinkage_lambda=applied_lam,
    )


def fit_dictionary(
    signatures: list[tuple[ImageSignature, int]],
    p: int = 1,
    lam: float = 0.5,
    seed=0,
    kmeans_max_iters: int = 100,
    kmeans_n_init: int = 4,
) -> Dictionary:
    """Build one ClassSignature per class from labeled support signatures."""
    if not signatures:
        raise DataError("no support signatures")
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"lambda {lam} outside [0,1]")
    by_class: dict[int, list[np.ndarray]] = {}
    for sig, label in signatures:
        by_class.setdefault(label, []).append(sig.r)
    n_words = len(signatures[0][0].r)
    base = seed if isinstance(seed, (tuple, list)) else (seed,)
    out = [
        fit_class_signature(
            np.vstack(by_class[label]), label, p, lam, seed=(*base, label),
            kmeans_max_iters=kmeans_max_iters, kmeans_n_init=kmeans_n_init,
        )
        for label in sorted(by_class)
    ]
    return Dictionary(signatures=out, p=p, n_words=n_words)


def mahalanobis(query: ImageSignature, sig: ClassSignature) -> np.ndarray:
    """Half squared Mahalanobis distance of the query to each sub-centroid:
    0.5 * (r - mu)' precision (r - mu), shape (p,)."""
    r = np.asarray(query.r, dtype=np.float64)
    if r.shape != (sig.n_words,):
        raise DataError(f"query dimension {r.shape} != ({sig.n_words},)")
    diffs = sig.centroids - r
    values = 0.5 * np.einsum("pi,ij,pj->p", diffs, sig.precision, diffs)
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite Mahalanobis distance for '{query.source_id}'")
    # an SPD precision keeps the quadratic form >= 0; clear rounding dust
    return np.maximum(values, 0.0)


def distance_vector(query: ImageSignature, dictionary: Dictionary) -> DistanceVector:
    """Concatenated Mahalanobis distances over classes in label order, length C*p."""
    parts = [mahalanobis(query, sig) for sig in dictionary.signatures]
    return DistanceVector(d=np.concatenate(parts), query_id=query.source_id)


def dictionary_to_section(dictionary: Dictionary) -> bytes:
    meta = {
        "p": dictionary.p,
        "n_words": dictionary.n_words,
        "class_labels": dictionary.class_labels,
        "lambdas": [s.shrinkage_lambda for s in dictionary.signatures],
    }
    arrays = {}
    for s in dictionary.signatures:
        arrays[f"centroids_{s.class_label}"] = s.centroids.astype("<f4")
        arrays[f"covariance_{s.class_label}"] = s.covariance.astype("<f4")
    return formats.pack_block(meta, arrays)


def dictionary_from_section(payload: bytes) -> Dictionary:
    meta, arrays = formats.unpack_block(payload)
    signatures = []
    for label, lam in zip(meta["class_labels"], meta["lambdas"]):
        cov = arrays[f"covariance_{label}"].astype(np.float64)
        cov = 0.5 * (cov + cov.T)
        factor = _factorize(cov)
        if factor is None:
            raise NumericalError(f"stored covariance for class {label} is not positive definite")
        precision = scipy.linalg.cho_solve(factor, np.eye(cov.shape[0]))
        precision = 0.5 * (precision + precision.T)
        signatures.append(
            ClassSignature(
                class_label=int(label),
                centroids=arrays[f"centroids_{label}"].astype(np.float64),
                covariance=cov,
                precision=precision,
                shrinkage_lambda=float(lam),
            )
        )
    return Dictionary(signatures=signatures, p=int(meta["p"]), n_words=int(meta["n_words"]))
