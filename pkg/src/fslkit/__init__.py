"""Few-shot metric classification of images.

Pipeline: pretrained-CNN activations -> PCA -> k-means vocabulary ->
normalized image signatures -> per-class Mahalanobis dictionary -> LDA.
Includes a seeded trial harness (shot sweeps, ROC/AUC) and patch-grid
attention heat maps.
"""

from .backbones import BackboneHandle, GridProjectionBackbone, OnnxBackbone, embed, embed_corpus
from .config import RunConfig
from .corpus import (
    EmbeddingSet,
    EpisodeSplit,
    ImageRef,
    LabeledCorpus,
    load_corpus,
    make_split,
    preprocess_image,
)
from .dictionary import ClassSignature, Dictionary, DistanceVector, distance_vector, fit_dictionary, mahalanobis
from .encoder import EncoderStack, ImageSignature, PcaTransform, Vocabulary, encode, fit_pca, fit_vocabulary, kmeans
from .errors import DataError, FslError, NumericalError, UsageError
from .evaluation import RocCurve, TrialConfig, TrialReport, roc, run_trials, sweep
from .heatmap import HeatmapGrid, patch_grid, render, score_patches
from .lda import LdaModel, Prediction, classify, fit_lda
from .pipeline import FittedModel, fit_pipeline

__version__ = "0.1.0"

__all__ = [
    "BackboneHandle",
    "ClassSignature",
    "DataError",
    "Dictionary",
    "DistanceVector",
    "EmbeddingSet",
    "EncoderStack",
    "EpisodeSplit",
    "FittedModel",
    "FslError",
    "GridProjectionBackbone",
    "HeatmapGrid",
    "ImageRef",
    "ImageSignature",
    "LabeledCorpus",
    "LdaModel",
    "NumericalError",
    "OnnxBackbone",
    "PcaTransform",
    "Prediction",
    "RocCurve",
    "RunConfig",
    "TrialConfig",
    "TrialReport",
    "UsageError",
    "Vocabulary",
    "classify",
    "distance_vector",
    "embed",
    "embed_corpus",
    "encode",
    "fit_dictionary",
    "fit_lda",
    "fit_pca",
    "fit_pipeline",
    "fit_vocabulary",
    "kmeans",
    "load_corpus",
    "mahalanobis",
    "make_split",
    "patch_grid",
    "preprocess_image",
    "render",
    "roc",
    "run_trials",
    "score_patches",
    "sweep",
]
