"""Experimental protocol: seeded trials over binary scenarios and shot
counts, ROC/AUC computation, and cross-trial aggregation.

Trial t of a run uses seed base_seed + t. Every reported number is a pure
function of (corpus, config), so repeated runs are byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .corpus import EmbeddingSet, LabeledCorpus, make_split, subcorpus
from .errors import DataError, FslError
from .lda import Prediction
from .pipeline import fit_pipeline, support_embeddings

log = logging.getLogger(__name__)

MEAN_ROC_GRID_POINTS = 101


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sorted ROC points (fpr, tpr, threshold) and trapezoidal AUC.

    The first point is (0, 0) at threshold +inf; the last is (1, 1) at the
    lowest observed score. FPR and TPR are non-decreasing as the threshold
    decreases.
    """

    points: list[tuple[float, float, float]]
    auc: float

    def __post_init__(self):
        if not self.points:
            raise DataError("empty ROC curve")
        fprs = [p[0] for p in self.points]
        tprs = [p[1] for p in self.points]
        thresholds = [p[2] for p in self.points]
        if (fprs[0], tprs[0]) != (0.0, 0.0) or (fprs[-1], tprs[-1]) != (1.0, 1.0):
            raise DataError("ROC curve must start at (0,0) and end at (1,1)")
        if any(b < a for a, b in zip(fprs, fprs[1:])) or any(b < a for a, b in zip(tprs, tprs[1:])):
            raise DataError("ROC curve must be monotone")
        if any(b >= a for a, b in zip(thresholds, thresholds[1:])):
            raise DataError("ROC thresholds must be strictly decreasing")
        if not 0.0 <= self.auc <= 1.0:
            raise DataError(f"AUC {self.auc} outside [0,1]")

    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def youden(self) -> tuple[float, float, float]:
        """(sensitivity, specificity, threshold) at the maximum of TPR - FPR;
        ties resolve to the highest threshold."""
        best = max(range(len(self.points)), key=lambda i: (self.points[i][1] - self.points[i][0], -i))
        fpr, tpr, thr = self.points[best]
        return tpr, 1.0 - fpr, thr

    def to_dict(self) -> dict:
        return {
            "points": [[float(f), float(t), float(th)] for f, t, th in self.points],
            "auc": float(self.auc),
        }


def roc(scores: list[tuple[float, int]]) -> RocCurve:
    """ROC curve from (score, binary_label) pairs; higher score means more
    positive. Equal scores collapse into one threshold step; AUC is the
    trapezoidal integral, which credits ties with half a pair-win.
    """
    if not scores:
        raise DataError("no scores")
    labels = np.array([int(y) for _, y in scores])
    values = np.array([float(s) for s, _ in scores])
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite scores")
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise DataError("ROC needs both classes present")

    order = np.argsort(-values, kind="stable")
    values = values[order]
    labels = labels[order]

    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j < n and values[j] == values[i]:
            tp += labels[j]
            fp += 1 - labels[j]
            j += 1
        points.append((fp / neg, tp / pos, float(values[i])))
        i = j

    auc = 0.0
    for (f0, t0, _), (f1, t1, _) in zip(points, points[1:]):
        auc += (f1 - f0) * (t1 + t0) / 2.0
    return RocCurve(points=points, auc=float(auc))


def mean_roc(curves: list[RocCurve], grid_points: int = MEAN_ROC_GRID_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Vertical averaging: mean TPR at a fixed FPR grid across curves."""
    grid = np.linspace(0.0, 1.0, grid_points)
    stack = np.empty((len(curves), grid_points))
    for i, curve in enumerate(curves):
        fpr = curve.fpr()
        tpr = curve.tpr()
        # upper envelope at duplicated FPRs (vertical curve segments)
        uniq_fpr, idx = np.unique(fpr, return_index=True)
        uniq_tpr = np.maximum.reduceat(tpr, idx)
        stack[i] = np.interp(grid, uniq_fpr, uniq_tpr)
    return grid, stack.mean(axis=0)


@dataclass(frozen=True)
class TrialConfig:
    """One experimental cell: a binary scenario at a fixed shot count."""

    scenario: tuple[str, str]  # (negative class, positive class), names or indices
    shots_k: int
    n_trials: int = 10
    test_fraction: float = 0.2
    base_seed: int = 0
    pipeline: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.n_trials < 1:
            raise DataError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.shots_k < 2:
            raise DataError(f"shots_k must be >= 2, got {self.shots_k}")


@dataclass
class TrialResult:
    trial: int
    seed: int
    predictions: list[Prediction]
    true_labels: list[int]
    curve: RocCurve
    sensitivity: float
    specificity: float
    youden_threshold: float
    fit_time_s: float

    def to_dict(self, deterministic: bool = False) -> dict:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "auc": float(self.curve.auc),
            "roc": self.curve.to_dict(),
            "sensitivity": float(self.sensitivity),
            "specificity": float(self.specificity),
            "youden_threshold": float(self.youden_threshold),
            "fit_time_s": 0.0 if deterministic else float(self.fit_time_s),
            "predictions": [
                {**p.to_dict(), "true_label": int(t)}
                for p, t in zip(self.predictions, self.true_labels)
            ],
        }


@dataclass
class TrialReport:
    scenario: tuple[str, str]
    shots_k: int
    trials: list[TrialResult]
    mean_fpr: np.ndarray
    mean_tpr: np.ndarray
    mean_auc: float
    std_auc: float
    config: dict

    def to_dict(self, deterministic: bool = False) -> dict:
        return {
            "scenario": list(self.scenario),
            "shots_k": self.shots_k,
            "n_trials": len(self.trials),
            "mean_auc": float(self.mean_auc),
            "std_auc": float(self.std_auc),
            "mean_sensitivity": float(np.mean([t.sensitivity for t in self.trials])),
            "mean_specificity": float(np.mean([t.specificity for t in self.trials])),
            "mean_fit_time_s": 0.0 if deterministic else float(np.mean([t.fit_time_s for t in self.trials])),
            "mean_roc": {
                "fpr": [float(v) for v in self.mean_fpr],
                "tpr": [float(v) for v in self.mean_tpr],
            },
            "split_stratification": "per_class",
            "trials": [t.to_dict(deterministic=deterministic) for t in self.trials],
            "config": self.config,
        }


def _check_scenario_counts(corpus: LabeledCorpus, labels: list[int], tconfig: TrialConfig) -> None:
    counts = corpus.class_counts()
    for label in labels:
        n = counts.get(label, 0)
        n_query = max(1, int(n * tconfig.test_fraction))
        if n - n_query < tconfig.shots_k:
            raise DataError(
                f"class '{corpus.class_names[label]}' has {n} items; "
                f"needs {tconfig.shots_k} supports after a {tconfig.test_fraction:.0%} query split"
            )


def _run_one_trial(sub: LabeledCorpus, tconfig: TrialConfig, trial: int) -> TrialResult:
    seed = tconfig.base_seed + trial
    split = make_split(sub, [0, 1], tconfig.shots_k, tconfig.test_fraction, seed)
    support = support_embeddings(sub, split)
    pconfig = tconfig.pipeline.override(seed=seed)
    unlabeled = None
    if pconfig.pca_pool == "corpus":
        covered = {i for ids in split.support.values() for i in ids}
        unlabeled = [
            it.payload for it in sub.items
            if it.item_id not in covered and isinstance(it.payload, EmbeddingSet)
        ]
    model = fit_pipeline(support, pconfig, unlabeled_pool=unlabeled, class_names=sub.class_names)
    predictions = model.predict_corpus(sub, ids=split.query)
    true_labels = [sub.item(i).class_label for i in split.query]
    curve = roc([(p.score, t) for p, t in zip(predictions, true_labels)])
    sens, spec, thr = curve.youden()
    return TrialResult(
        trial=trial,
        seed=seed,
        predictions=predictions,
        true_labels=true_labels,
        curve=curve,
        sensitivity=sens,
        specificity=spec,
        youden_threshold=thr,
        fit_time_s=model.fit_time_s,
    )


def run_trials(corpus: LabeledCorpus, tconfig: TrialConfig) -> TrialReport:
    """Run n_trials seeded episodes of one scenario/shot cell and aggregate."""
    label_a = corpus.resolve_class(tconfig.scenario[0])
    label_b = corpus.resolve_class(tconfig.scenario[1])
    if label_a == label_b:
        raise DataError(f"scenario classes must differ, got {tconfig.scenario}")
    _check_scenario_counts(corpus, [label_a, label_b], tconfig)
    sub = subcorpus(corpus, [label_a, label_b])  # class 0 negative, class 1 positive

    threads = tconfig.pipeline.threads
    indices = list(range(tconfig.n_trials))
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _run_one_trial(sub, tconfig, t), indices))
    else:
        results = [_run_one_trial(sub, tconfig, t) for t in indices]

    curves = [r.curve for r in results]
    grid, mean_tpr = mean_roc(curves)
    aucs = np.array([r.curve.auc for r in results])
    return TrialReport(
        scenario=tconfig.scenario,
        shots_k=tconfig.shots_k,
        trials=results,
        mean_fpr=grid,
        mean_tpr=mean_tpr,
        mean_auc=float(aucs.mean()),
        std_auc=float(aucs.std(ddof=1)) if len(aucs) > 1 else 0.0,
        config=tconfig.pipeline.to_dict(),
    )


@dataclass
class SweepReport:
    scenarios: list[tuple[str, str]]
    shot_list: list[int]
    cells: dict[tuple[tuple[str, str], int], TrialReport]
    errors: dict[tuple[tuple[str, str], int], str]

    def to_dict(self, deterministic: bool = False) -> dict:
        out = {
            "scenarios": [list(s) for s in self.scenarios],
            "shots": list(self.shot_list),
            "cells": [],
        }
        for scenario in self.scenarios:
            for k in self.shot_list:
                key = (scenario, k)
                if key in self.cells:
                    out["cells"].append(self.cells[key].to_dict(deterministic=deterministic))
                elif key in self.errors:
                    out["cells"].append({
                        "scenario": list(scenario), "shots_k": k, "error": self.errors[key],
                    })
        return out


def sweep(
    corpus: LabeledCorpus,
    scenarios: list[tuple[str, str]],
    shot_list: list[int],
    config: RunConfig | None = None,
) -> SweepReport:
    """Matrix of run_trials over scenarios x shot counts. A failing cell is
    recorded and the sweep continues."""
    config = config or RunConfig()
    cells: dict[tuple[tuple[str, str], int], TrialReport] = {}
    errors: dict[tuple[tuple[str, str], int], str] = {}
    for scenario in scenarios:
        for k in shot_list:
            tconfig = TrialConfig(
                scenario=scenario,
                shots_k=k,
                n_trials=config.trials,
                test_fraction=config.test_fraction,
                base_seed=config.seed,
                pipeline=config,
            )
            try:
                cells[(scenario, k)] = run_trials(corpus, tconfig)
                log.info("scenario %s k=%d: mean AUC %.4f", scenario, k, cells[(scenario, k)].mean_auc)
            except FslError as exc:
                log.error("scenario %s k=%d failed: %s", scenario, k, exc)
                errors[(scenario, k)] = str(exc)
    return SweepReport(scenarios=scenarios, shot_list=shot_list, cells=cells, errors=errors)
