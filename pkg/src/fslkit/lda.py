"""Fisher linear discriminant over Mahalanobis distance vectors.

Directions solve the generalized symmetric eigenproblem S_B v = w (S_W +
reg I) v and keep scipy's normalization v' (S_W + reg I) v = 1, so the
projected space is within-class whitened and nearest-projected-mean
assignment is the natural decision rule. For two classes the single
direction is oriented so that positive scores mean class 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dictionary import DistanceVector
from .errors import DataError, NumericalError
from . import formats

REG_SCALE = 1e-6


@dataclass(frozen=True)
class LdaModel:
    weights: np.ndarray          # (n_dirs, dim) discriminant directions
    class_means: np.ndarray      # (C, dim) in distance space
    class_labels: np.ndarray     # (C,)
    priors: np.ndarray           # (C,)
    within_scatter_reg: float
    projected_covariance: np.ndarray  # (n_dirs, n_dirs), for the posterior variant

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise NumericalError("LDA weights contain non-finite entries")
        c = self.class_means.shape[0]
        if c < 2:
            raise DataError("LDA needs >= 2 classes")
        expected_dirs = min(c - 1, self.class_means.shape[1])
        if self.weights.shape[0] != expected_dirs:
            raise NumericalError(f"expected {expected_dirs} discriminant directions, got {self.weights.shape[0]}")

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.weights @ np.asarray(x, dtype=np.float64)

    def projected_means(self) -> np.ndarray:
        return self.class_means @ self.weights.T  # (C, n_dirs)


@dataclass(frozen=True)
class Prediction:
    query_id: str
    predicted_label: int
    score: float
    distances: DistanceVector

    def to_dict(self) -> dict:
        return {
            "id": self.query_id,
            "label": int(self.predicted_label),
            "score": float(self.score),
            "distances": [float(v) for v in self.distances.d],
        }


def scatter_matrices(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Within-class and between-class scatter, class means, class labels."""
    labels = np.unique(y)
    dim = x.shape[1]
    overall = x.mean(axis=0)
    s_w = np.zeros((dim, dim))
    s_b = np.zeros((dim, dim))
    means = np.zeros((len(labels), dim))
    for i, c in enumerate(labels):
        xc = x[y == c]
        mu = xc.mean(axis=0)
        means[i] = mu
        centered = xc - mu
        s_w += centered.T @ centered
        gap = (mu - overall)[:, None]
        s_b += xc.shape[0] * (gap @ gap.T)
    return s_w, s_b, means, labels


def fit_lda(
    features: list[tuple[DistanceVector, int]],
    reg: float | None = None,
) -> LdaModel:
    """Fit Fisher directions on labeled distance vectors.

    reg=None uses the default 1e-6 * trace(S_W) / dim added to S_W before
    inversion; pass an explicit value to override.
    """
    if not features:
        raise DataError("no training features")
    x = np.vstack([np.asarray(dv.d, dtype=np.float64) for dv, _ in features])
    y = np.array([label for _, label in features])
    labels, counts = np.unique(y, return_counts=True)
    if len(labels) < 2:
        raise DataError(f"LDA needs >= 2 classes, got {len(labels)}")
    if counts.min() < 2:
        short = labels[np.argmin(counts)]
        raise DataError(f"class {short} has {counts.min()} samples, need >= 2")

    s_w, s_b, means, labels = scatter_matrices(x, y)
    dim = x.shape[1]
    if reg is None:
        reg = REG_SCALE * np.trace(s_w) / dim
    s_w_reg = s_w + reg * np.eye(dim)

    try:
        eigvals, eigvecs = scipy.linalg.eigh(s_b, s_w_reg)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            f"within-class scatter is singular (reg={reg}); raise reg"
        ) from exc
    order = np.argsort(eigvals)[::-1]
    n_dirs = min(len(labels) - 1, dim)
    weights = eigvecs[:, order[:n_dirs]].T.copy()

    if len(labels) == 2:
        # orient so positive projections point toward class 1 (higher label)
        if weights[0] @ (means[1] - means[0]) < 0:
            weights[0] *= -1.0
    else:
        for row in weights:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0

    # shared within-class covariance in the projected space (posterior variant)
    n = x.shape[0]
    within_cov = s_w / max(n - len(labels), 1)
    projected_cov = weights @ within_cov @ weights.T
    projected_cov += 1e-12 * np.eye(n_dirs)

    priors = np.full(len(labels), 1.0 / len(labels))
    return LdaModel(
        weights=weights,
        class_means=means,
        class_labels=labels.astype(np.int64),
        priors=priors,
        within_scatter_reg=float(reg),
        projected_covariance=projected_cov,
    )


def classify(query: DistanceVector, model: LdaModel, rule: str = "fisher") -> Prediction:
    """Assign the nearest projected class mean (default) or the maximum
    Gaussian posterior ('posterior'). Binary score is the signed distance to
    the projected midpoint along the discriminant; ties break toward the
    lower label index.
    """
    q = np.asarray(query.d, dtype=np.float64)
    if q.shape != (model.class_means.shape[1],):
        raise DataError(f"query dimension {q.shape} != ({model.class_means.shape[1]},)")
    z = model.project(q)
    pm = model.projected_means()

    if rule == "fisher":
        sq = np.sum((pm - z) ** 2, axis=1)
        idx = int(np.argmin(sq))
    elif rule == "posterior":
        log_post = _log_posteriors(z, model)
        idx = int(np.argmax(log_post))
    else:
        raise DataError(f"unknown decision rule '{rule}'")

    if model.n_classes == 2:
        midpoint = 0.5 * (pm[0] + pm[1])
        if rule == "posterior":
            log_post = _log_posteriors(z, model)
            score = float(log_post[1] - log_post[0])
        else:
            score = float(z[0] - midpoint[0])
        if rule == "fisher" and score == 0.0:
            idx = 0
    else:
        sq = np.sort(np.sum((pm - z) ** 2, axis=1))
        score = float(sq[1] - sq[0])  # margin between best and runner-up

    return Prediction(
        query_id=query.query_id,
        predicted_label=int(model.class_labels[idx]),
        score=score,
        distances=query,
    )


def _log_posteriors(z: np.ndarray, model: LdaModel) -> np.ndarray:
    pm = model.projected_means()
    prec = np.linalg.inv(model.projected_covariance)
    out = np.empty(model.n_classes)
    for i in range(model.n_classes):
        gap = z - pm[i]
        out[i] = np.log(model.priors[i]) - 0.5 * gap @ prec @ gap
    return out


def posterior_probabilities(query: DistanceVector, model: LdaModel) -> np.ndarray:
    """Per-class posterior under shared-covariance Gaussians in the projected space."""
    z = model.project(np.asarray(query.d, dtype=np.float64))
    log_post = _log_posteriors(z, model)
    log_post -= log_post.max()
    p = np.exp(log_post)
    return p / p.sum()


def lda_to_section(model: LdaModel) -> bytes:
    meta = {"reg": model.within_scatter_reg}
    arrays = {
        "weights": model.weights.astype("<f8"),
        "class_means": model.class_means.astype("<f8"),
        "class_labels": model.class_labels.astype("<i8"),
        "priors": model.priors.astype("<f8"),
        "projected_covariance": model.projected_covariance.astype("<f8"),
    }
    return formats.pack_block(meta, arrays)


def lda_from_section(payload: bytes) -> LdaModel:
    meta, arrays = formats.unpack_block(payload)
    return LdaModel(
        weights=arrays["weights"].astype(np.float64),
        class_means=arrays["class_means"].astype(np.float64),
        class_labels=arrays["class_labels"].astype(np.int64),
        priors=arrays["priors"].astype(np.float64),
        within_scatter_reg=float(meta["reg"]),
        projected_covariance=arrays["projected_covariance"].astype(np.float64),
    )
