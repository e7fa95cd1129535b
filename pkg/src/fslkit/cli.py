"""Command-line harness: ingest, embed, fit, predict, eval sweep, heatmap,
synth, plus encoder/dict sub-tools.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
FSL_LOG sets the log level (DEBUG/INFO/WARNING/ERROR). A TOML file passed
via --config supplies defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats, reporting
from .backbones import backbone_from_config, embed_corpus
from .config import RunConfig
from .corpus import DEFAULT_TARGET_SIZE, LabeledCorpus, load_corpus, standardize_pixels, write_index
from .dictionary import dictionary_to_section, fit_dictionary
from .encoder import EncoderStack, ImageSignature, fit_pca, fit_vocabulary
from .errors import DataError, NumericalError, UsageError
from .evaluation import sweep
from .heatmap import patch_grid, render, save_png, score_patches, write_heatmap_json
from .pipeline import FittedModel, fit_pipeline
from .synth import ITEM_SIGMA, LOC_SIGMA, SEPARATION, make_gaussian_corpus

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override its values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="zero wall-clock fields so outputs are byte-reproducible")
    p.add_argument("--d-pca", type=int, default=None)
    p.add_argument("--n-words", type=int, default=None)
    p.add_argument("--encode-mode", choices=["soft", "hard"], default=None)
    p.add_argument("--p", type=int, default=None, help="sub-clusters per class")
    p.add_argument("--lambda", dest="shrinkage_lambda", type=float, default=None)
    p.add_argument("--lda-reg", type=float, default=None)
    p.add_argument("--lda", dest="lda_rule", choices=["fisher", "posterior"], default=None)
    p.add_argument("--pca-subsample", type=int, default=None)
    p.add_argument("--pca-pool", choices=["support", "corpus"], default=None)
    p.add_argument("--kmeans-iters", dest="kmeans_max_iters", type=int, default=None)
    p.add_argument("--kmeans-n-init", type=int, default=None)


def _add_backbone_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", dest="backbone", default=None,
                   help="ONNX model path, or 'grid' for the built-in projection backbone")
    p.add_argument("--tap", default=None, help="layer to tap; 'pooled' or 'LAYER:pooled' pools locations")
    p.add_argument("--grid-size", type=int, default=None)
    p.add_argument("--grid-d-latent", type=int, default=None)
    p.add_argument("--grid-seed", type=int, default=None)


# "shots" is omitted: fit and eval parse it per-verb (int vs comma list)
_CONFIG_KEYS = [
    "seed", "threads", "deterministic", "d_pca", "n_words", "encode_mode", "p",
    "shrinkage_lambda", "lda_reg", "lda_rule", "pca_subsample", "pca_pool",
    "kmeans_max_iters", "kmeans_n_init", "backbone", "tap", "grid_size",
    "grid_d_latent", "grid_seed", "trials", "test_fraction",
]


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_toml(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    return config.override(**overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="fsl", description="Few-shot metric classification engine")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="load and normalize a corpus")
    p.add_argument("--root", required=True)
    p.add_argument("--format", choices=["image_folders", "embeddings"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-corrupt", action="store_true")
    _add_config_flags(p)

    p = sub.add_parser("embed", help="embed an image corpus with a backbone")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-corrupt", action="store_true")
    _add_backbone_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("fit", help="fit a model on a support set")
    p.add_argument("--corpus", required=True)
    p.add_argument("--classes", default=None, help="comma-separated class names or indices (default: all)")
    p.add_argument("--shots", type=int, default=None, help="supports per class (default: every item)")
    p.add_argument("--out", required=True)
    _add_backbone_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("predict", help="classify embedded queries with a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--json", action="store_true", help="print a JSON array of predictions")
    p.add_argument("--out", default=None)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="experimental protocols")
    esub = p.add_subparsers(dest="eval_verb", required=True)
    ps = esub.add_parser("sweep", help="scenario x shot-count ROC sweep")
    ps.add_argument("--corpus", required=True)
    ps.add_argument("--scenarios", required=True, help="e.g. healthy:covid,healthy:pneumonia")
    ps.add_argument("--shots", default=None, help="comma-separated shot counts")
    ps.add_argument("--trials", type=int, default=None)
    ps.add_argument("--test-fraction", type=float, default=None)
    ps.add_argument("--out", required=True, help="report directory")
    _add_backbone_flags(ps)
    _add_config_flags(ps)

    p = sub.add_parser("heatmap", help="patch-grid attention map for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target_class", required=True)
    p.add_argument("--patch", type=int, default=56)
    p.add_argument("--stride", type=int, default=28)
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("--out", required=True)
    p.add_argument("--json", dest="json_out", default=None)
    _add_config_flags(p)

    p = sub.add_parser("synth", help="generate the calibrated synthetic Gaussian corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--d-latent", type=int, default=32)
    p.add_argument("--locations", type=int, default=4)
    p.add_argument("--separation", type=float, default=SEPARATION)
    p.add_argument("--item-sigma", type=float, default=ITEM_SIGMA)
    p.add_argument("--loc-sigma", type=float, default=LOC_SIGMA)
    _add_config_flags(p)

    p = sub.add_parser("encoder", help="fit or apply a standalone encoder")
    esub = p.add_subparsers(dest="encoder_verb", required=True)
    pf = esub.add_parser("fit")
    pf.add_argument("--corpus", required=True)
    pf.add_argument("--out", required=True)
    _add_config_flags(pf)
    pa = esub.add_parser("apply")
    pa.add_argument("--encoder", required=True)
    pa.add_argument("--corpus", required=True)
    pa.add_argument("--out", required=True, help="signature CSV (id,label,values)")
    _add_config_flags(pa)

    p = sub.add_parser("dict", help="fit a dictionary from signatures")
    dsub = p.add_subparsers(dest="dict_verb", required=True)
    pd = dsub.add_parser("fit")
    pd.add_argument("--support", required=True, help="signature CSV from 'encoder apply'")
    pd.add_argument("--out", required=True)
    _add_config_flags(pd)

    return parser


def _load_embedded_corpus(path: str, config: RunConfig, skip_corrupt: bool = False) -> LabeledCorpus:
    corpus = load_corpus(path, skip_corrupt=skip_corrupt)
    if corpus.has_embeddings():
        return corpus
    backbone = backbone_from_config(config)
    log.info("embedding %d images with %s backbone", len(corpus.items), backbone.describe()["kind"])
    return embed_corpus(backbone, corpus, skip_corrupt=skip_corrupt, threads=config.threads)


def _parse_scenarios(text: str) -> list[tuple[str, str]]:
    out = []
    for part in text.split(","):
        halves = part.split(":")
        if len(halves) != 2 or not halves[0] or not halves[1]:
            raise UsageError(f"bad scenario '{part}'; expected NEG:POS")
        out.append((halves[0], halves[1]))
    return out


def _cmd_ingest(args) -> int:
    resolve_config(args)  # validates config file and flags
    fmt = "image_folders" if args.format == "image_folders" else "embedding_file"
    corpus = load_corpus(args.root, format=fmt, skip_corrupt=args.skip_corrupt)
    counts = corpus.class_counts()
    for label, name in enumerate(corpus.class_names):
        log.info("class %-12s %d items", name, counts[label])
    if corpus.has_embeddings():
        formats.write_embedding_corpus(corpus, args.out)
    else:
        write_index(corpus, args.out, root=Path(args.root))
    print(f"wrote {args.out}: {len(corpus.items)} items, {corpus.n_classes} classes")
    return 0


def _cmd_embed(args) -> int:
    config = resolve_config(args)
    corpus = load_corpus(args.corpus, skip_corrupt=args.skip_corrupt)
    if corpus.has_embeddings():
        formats.write_embedding_corpus(corpus, args.out)
        print(f"corpus is already embedded; wrote {args.out} unchanged")
        return 0
    backbone = backbone_from_config(config)
    embedded = embed_corpus(backbone, corpus, skip_corrupt=args.skip_corrupt, threads=config.threads)
    formats.write_embedding_corpus(embedded, args.out)
    print(f"wrote {args.out}: {len(embedded.items)} embedding sets")
    return 0


def _support_items(corpus: LabeledCorpus, labels: list[int], shots: int | None, seed: int):
    grouped = corpus.ids_by_class()
    rng = np.random.default_rng(seed)
    support = []
    for label in labels:
        ids = grouped.get(label, [])
        if shots is not None:
            if len(ids) < shots:
                raise DataError(f"class '{corpus.class_names[label]}' has {len(ids)} items, need {shots}")
            perm = rng.permutation(len(ids))
            ids = sorted(ids[i] for i in perm[:shots])
        for item_id in ids:
            support.append((corpus.item(item_id).payload, label))
    return support


def _cmd_fit(args) -> int:
    config = resolve_config(args)
    corpus = load_corpus(args.corpus)
    backbone = backbone_from_config(config) if config.backbone else None
    if not corpus.has_embeddings():
        if backbone is None:
            raise DataError("image corpus needs a backbone; pass --model (or supply embeddings)")
        corpus = embed_corpus(backbone, corpus, threads=config.threads)
    if args.classes:
        labels = [corpus.resolve_class(c) for c in args.classes.split(",")]
    else:
        labels = list(range(corpus.n_classes))
    support = _support_items(corpus, labels, args.shots, config.seed)
    model = fit_pipeline(support, config, class_names=corpus.class_names, backbone=backbone)
    model.save(args.out, deterministic=config.deterministic)
    print(f"wrote {args.out}: fit on {len(support)} supports in {model.fit_time_s:.2f}s")
    return 0


def _cmd_predict(args) -> int:
    config = resolve_config(args)
    model = FittedModel.load(args.model)
    corpus = load_corpus(args.input)
    predictions = model.predict_corpus(corpus)
    doc = [p.to_dict() for p in predictions]
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}: {len(doc)} predictions")
    elif args.json:
        sys.stdout.write(text)
    else:
        for p in predictions:
            name = model.class_names[p.predicted_label] if model.class_names else str(p.predicted_label)
            print(f"{p.query_id}\t{name}\t{p.score:+.6f}")
    return 0


def _cmd_eval_sweep(args) -> int:
    config = resolve_config(args)
    corpus = _load_embedded_corpus(args.corpus, config)
    scenarios = _parse_scenarios(args.scenarios)
    if args.shots:
        shot_list = [int(s) for s in args.shots.split(",")]
        config = config.override(shots=shot_list)
    report = sweep(corpus, scenarios, config.shots, config)
    paths = reporting.write_sweep_outputs(report, args.out, deterministic=config.deterministic)
    for scenario in report.scenarios:
        for k in report.shot_list:
            cell = report.cells.get((scenario, k))
            if cell:
                print(f"{scenario[0]}:{scenario[1]} k={k}: mean AUC {cell.mean_auc:.4f} +/- {cell.std_auc:.4f}")
            else:
                print(f"{scenario[0]}:{scenario[1]} k={k}: FAILED {report.errors[(scenario, k)]}")
    if report.errors and not report.cells:
        raise DataError("every sweep cell failed")
    print(f"wrote {paths['report_json'].parent}")
    return 0


def _cmd_heatmap(args) -> int:
    resolve_config(args)
    model = FittedModel.load(args.model, attach_backbone=True)
    try:
        with Image.open(args.image) as im:
            im = im.convert("RGB")
            h, w = DEFAULT_TARGET_SIZE
            if im.size != (w, h):
                im = im.resize((w, h), Image.Resampling.BILINEAR)
            raw = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot decode image {args.image}: {exc}") from exc
    tensor = standardize_pixels(raw)
    if model.class_names and args.target_class in model.class_names:
        target = model.class_names.index(args.target_class)
    else:
        target = int(args.target_class) if args.target_class.isdigit() else None
        if target is None:
            raise DataError(f"unknown class '{args.target_class}'; known: {model.class_names}")
    patches = patch_grid(tensor, args.patch, args.stride)
    grid = score_patches(patches, model, target)
    rgba = render(grid, raw, args.alpha)
    save_png(rgba, args.out)
    if args.json_out:
        write_heatmap_json(grid, args.json_out, extra={
            "image": str(args.image), "target_class": args.target_class, "alpha": args.alpha,
        })
    r, c = grid.argmin_cell()
    print(f"wrote {args.out}; closest patch at row {r}, col {c}")
    return 0


def _cmd_synth(args) -> int:
    config = resolve_config(args)
    corpus = make_gaussian_corpus(
        n_classes=args.classes,
        per_class=args.per_class,
        d_latent=args.d_latent,
        n_locations=args.locations,
        seed=config.seed,
        separation=args.separation,
        item_sigma=args.item_sigma,
        loc_sigma=args.loc_sigma,
    )
    formats.write_embedding_corpus(corpus, args.out)
    print(f"wrote {args.out}: {len(corpus.items)} items, {corpus.n_classes} classes")
    return 0


def _cmd_encoder(args) -> int:
    config = resolve_config(args)
    if args.encoder_verb == "fit":
        corpus = load_corpus(args.corpus)
        if not corpus.has_embeddings():
            raise DataError("encoder fit needs an embedded corpus")
        vectors = np.vstack([it.payload.vectors for it in corpus.items]).astype(np.float64)
        rng = np.random.default_rng((config.seed, 11))
        n_sample = min(config.pca_subsample, vectors.shape[0])
        idx = np.sort(rng.choice(vectors.shape[0], size=n_sample, replace=False))
        pca = fit_pca(vectors[idx], min(config.d_pca, vectors.shape[1]))
        vocab = fit_vocabulary(pca.transform(vectors), config.n_words, seed=(config.seed, 13),
                               max_iters=config.kmeans_max_iters, n_init=config.kmeans_n_init)
        encoder = EncoderStack(pca=pca, vocab=vocab, mode=config.encode_mode)
        manifest = {"format": "fsl-encoder", "config": config.to_dict(), "seed": config.seed,
                    "class_names": corpus.class_names}
        formats.write_model_file(args.out, manifest, encoder.to_sections())
        print(f"wrote {args.out}")
        return 0
    # apply
    _, sections = formats.read_model_file(args.encoder)
    encoder = EncoderStack.from_sections(sections)
    corpus = load_corpus(args.corpus)
    with open(args.out, "w", encoding="utf-8") as f:
        for it in corpus.items:
            sig = encoder.encode(it.payload)
            values = ",".join(repr(float(v)) for v in sig.r)
            f.write(f"{it.item_id},{it.class_label},{values}\n")
    print(f"wrote {args.out}: {len(corpus.items)} signatures")
    return 0


def _cmd_dict(args) -> int:
    config = resolve_config(args)
    rows = formats.read_signature_csv(args.support)
    signatures = [
        (ImageSignature(r=values, source_id=item_id), label)
        for item_id, label, values in rows
    ]
    dictionary = fit_dictionary(signatures, p=config.p, lam=config.shrinkage_lambda, seed=(config.seed, 17),
                                kmeans_max_iters=config.kmeans_max_iters, kmeans_n_init=config.kmeans_n_init)
    manifest = {"format": "fsl-dictionary", "config": config.to_dict(), "seed": config.seed}
    formats.write_model_file(args.out, manifest, {formats.SECTION_DICT: dictionary_to_section(dictionary)})
    print(f"wrote {args.out}: {len(dictionary.signatures)} class signatures")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "embed": _cmd_embed,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "heatmap": _cmd_heatmap,
    "synth": _cmd_synth,
    "encoder": _cmd_encoder,
    "dict": _cmd_dict,
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FSL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb == "eval":
            return _cmd_eval_sweep(args)
        return _COMMANDS[args.verb](args)
    except UsageError as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


def console_main() -> None:
    sys.exit(main())
