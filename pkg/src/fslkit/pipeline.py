"""End-to-end fitting: PCA -> vocabulary -> signatures -> dictionary -> LDA.

Every stage is a closed-form or seeded deterministic fit, so a FittedModel
is a pure function of (support embeddings, config, seed). Stage failures are
re-raised with the stage name attached.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .backbones import backbone_from_description
from .config import RunConfig
from .corpus import EmbeddingSet, LabeledCorpus
from .dictionary import Dictionary, DistanceVector, dictionary_from_section, dictionary_to_section, distance_vector, fit_dictionary
from .encoder import EncoderStack, fit_pca, fit_vocabulary
from .errors import DataError, FslError
from .lda import LdaModel, Prediction, classify, fit_lda, lda_from_section, lda_to_section

log = logging.getLogger(__name__)

# sub-seed tags for the independent random streams of one fit
_SEED_PCA, _SEED_VOCAB, _SEED_DICT = 11, 13, 17


@dataclass
class FittedModel:
    """Fitted encoder, dictionary, and discriminant, plus provenance."""

    encoder: EncoderStack
    dictionary: Dictionary
    lda: LdaModel
    config: dict
    seed: int
    class_names: list[str] = field(default_factory=list)
    backbone: object | None = None
    backbone_desc: dict | None = None
    fit_time_s: float = 0.0
    lda_rule: str = "fisher"

    def distances(self, emb: EmbeddingSet) -> DistanceVector:
        return distance_vector(self.encoder.encode(emb), self.dictionary)

    def predict_embedding(self, emb: EmbeddingSet) -> Prediction:
        return classify(self.distances(emb), self.lda, rule=self.lda_rule)

    def predict_corpus(self, corpus: LabeledCorpus, ids: list[str] | None = None) -> list[Prediction]:
        items = corpus.items if ids is None else [corpus.item(i) for i in ids]
        out = []
        for it in items:
            if not isinstance(it.payload, EmbeddingSet):
                raise DataError(f"item '{it.item_id}' is not embedded; run embed first")
            out.append(self.predict_embedding(it.payload))
        return out

    # -- serialization ------------------------------------------------------

    def manifest(self, deterministic: bool = False) -> dict:
        return {
            "format": "fsl-model",
            "config": self.config,
            "seed": self.seed,
            "class_names": self.class_names,
            "backbone": self.backbone_desc,
            "lda_rule": self.lda_rule,
            "fit_time_s": 0.0 if deterministic else self.fit_time_s,
            "created_at": 0.0 if deterministic else time.time(),
        }

    def sections(self) -> dict[bytes, bytes]:
        out = self.encoder.to_sections()
        out[formats.SECTION_DICT] = dictionary_to_section(self.dictionary)
        out[formats.SECTION_LDA] = lda_to_section(self.lda)
        return out

    def to_bytes(self, deterministic: bool = False) -> bytes:
        return formats.model_file_bytes(self.manifest(deterministic=deterministic), self.sections())

    def save(self, path, deterministic: bool = False) -> None:
        formats.write_model_file(path, self.manifest(deterministic=deterministic), self.sections())

    @classmethod
    def load(cls, path, attach_backbone: bool = False) -> "FittedModel":
        manifest, sections = formats.read_model_file(path)
        encoder = EncoderStack.from_sections(sections)
        if formats.SECTION_DICT not in sections or formats.SECTION_LDA not in sections:
            raise DataError(f"{path}: not a full model file (missing dictionary or LDA section)")
        model = cls(
            encoder=encoder,
            dictionary=dictionary_from_section(sections[formats.SECTION_DICT]),
            lda=lda_from_section(sections[formats.SECTION_LDA]),
            config=manifest.get("config", {}),
            seed=int(manifest.get("seed", 0)),
            class_names=list(manifest.get("class_names", [])),
            backbone_desc=manifest.get("backbone"),
            fit_time_s=float(manifest.get("fit_time_s", 0.0)),
            lda_rule=manifest.get("lda_rule", "fisher"),
        )
        if attach_backbone:
            if model.backbone_desc is None:
                raise DataError(f"{path}: model carries no backbone description")
            model.backbone = backbone_from_description(model.backbone_desc)
        return model


def _stage(name: str):
    class _StageContext:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, FslError):
                exc.args = (f"stage {name}: {exc.args[0]}" if exc.args else f"stage {name}",)
            return False

    return _StageContext()


def fit_pipeline(
    support: list[tuple[EmbeddingSet, int]],
    config: RunConfig | None = None,
    unlabeled_pool: list[EmbeddingSet] | None = None,
    class_names: list[str] | None = None,
    backbone=None,
) -> FittedModel:
    """Fit the full stack on a support set of labeled embedding sets.

    The PCA trains on an unlabeled subsample of activation vectors (the
    support set's own activations, plus unlabeled_pool when pca_pool =
    "corpus"). The vocabulary, dictionary, and LDA train on the support set.
    """
    config = config or RunConfig()
    if not support:
        raise DataError("empty support set")
    t0 = time.perf_counter()
    seed = config.seed

    labels = sorted({label for _, label in support})
    vectors = [emb.vectors.astype(np.float64) for emb, _ in support]
    pool = list(vectors)
    if config.pca_pool == "corpus" and unlabeled_pool:
        pool.extend(e.vectors.astype(np.float64) for e in unlabeled_pool)
    stacked = np.vstack(pool)

    with _stage("fit_pca"):
        rng = np.random.default_rng((seed, _SEED_PCA))
        n_sample = min(config.pca_subsample, stacked.shape[0])
        idx = rng.choice(stacked.shape[0], size=n_sample, replace=False)
        d_pca = min(config.d_pca, stacked.shape[1])
        if d_pca < config.d_pca:
            log.info("d_pca reduced to latent dimension %d", d_pca)
        pca = fit_pca(stacked[np.sort(idx)], d_pca)

    with _stage("fit_vocabulary"):
        reduced = pca.transform(np.vstack(vectors))
        vocab = fit_vocabulary(
            reduced, config.n_words, seed=(seed, _SEED_VOCAB),
            max_iters=config.kmeans_max_iters, n_init=config.kmeans_n_init,
        )

    encoder = EncoderStack(pca=pca, vocab=vocab, mode=config.encode_mode)

    with _stage("encode_support"):
        signatures = [(encoder.encode(emb), label) for emb, label in support]

    with _stage("fit_dictionary"):
        dictionary = fit_dictionary(
            signatures, p=config.p, lam=config.shrinkage_lambda,
            seed=(seed, _SEED_DICT), kmeans_max_iters=config.kmeans_max_iters,
            kmeans_n_init=config.kmeans_n_init,
        )

    with _stage("fit_lda"):
        features = [(distance_vector(sig, dictionary), label) for sig, label in signatures]
        lda = fit_lda(features, reg=config.lda_reg)

    fit_time = time.perf_counter() - t0
    log.info("pipeline fit: %d supports, %d classes, %.3f s", len(support), len(labels), fit_time)
    return FittedModel(
        encoder=encoder,
        dictionary=dictionary,
        lda=lda,
        config=config.to_dict(),
        seed=seed,
        class_names=class_names or [],
        backbone=backbone,
        backbone_desc=backbone.describe() if backbone is not None else None,
        fit_time_s=fit_time,
        lda_rule=config.lda_rule,
    )


def support_embeddings(corpus: LabeledCorpus, split) -> list[tuple[EmbeddingSet, int]]:
    """Collect (EmbeddingSet, label) pairs for a split's support side."""
    out = []
    for label in sorted(split.support):
        for item_id in split.support[label]:
            it = corpus.item(item_id)
            if not isinstance(it.payload, EmbeddingSet):
                raise DataError(f"support item '{item_id}' is not embedded")
            out.append((it.payload, label))
    return out
