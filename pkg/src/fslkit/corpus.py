"""Labeled corpora, image preprocessing, and support/query episode splits.

A corpus item carries either an ImageRef (path on disk, decoded lazily) or a
precomputed EmbeddingSet. Item ordering is always lexicographic so that
seeded splits reproduce across filesystems.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}

# Input standardization of the pretrained backbone family these corpora feed
# (ImageNet convention). Embeddings are only meaningful under the backbone's
# training-time preprocessing.
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float64)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float64)

DEFAULT_TARGET_SIZE = (224, 224)


@dataclass(frozen=True)
class ImageRef:
    """Pointer to an image file plus the spatial size it is resized to."""

    path: Path
    target_size: tuple[int, int] = DEFAULT_TARGET_SIZE


@dataclass(frozen=True)
class EmbeddingSet:
    """Latent activation vectors of one image: shape (n_locations, d_latent)."""

    vectors: np.ndarray
    source_id: str

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2 or v.shape[0] < 1:
            raise DataError(f"embedding set '{self.source_id}': expected 2-D (n_locations, d_latent), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError(f"embedding set '{self.source_id}' contains non-finite values")

    @property
    def n_locations(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_latent(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class CorpusItem:
    item_id: str
    class_label: int
    payload: ImageRef | EmbeddingSet


@dataclass
class LabeledCorpus:
    """Immutable collection of labeled items with stable, lexicographic ordering."""

    items: list[CorpusItem]
    class_names: list[str]

    def __post_init__(self):
        n_classes = len(self.class_names)
        if n_classes < 2:
            raise DataError(f"corpus needs at least 2 classes, got {n_classes}")
        seen: set[str] = set()
        d_latent: int | None = None
        for it in self.items:
            if not 0 <= it.class_label < n_classes:
                raise DataError(f"item '{it.item_id}' has label {it.class_label} outside [0, {n_classes})")
            if it.item_id in seen:
                raise DataError(f"duplicate item id '{it.item_id}'")
            seen.add(it.item_id)
            if isinstance(it.payload, EmbeddingSet):
                if d_latent is None:
                    d_latent = it.payload.d_latent
                elif it.payload.d_latent != d_latent:
                    raise DataError(
                        f"item '{it.item_id}' has latent dimension {it.payload.d_latent}, expected {d_latent}"
                    )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in range(self.n_classes)}
        for it in self.items:
            counts[it.class_label] += 1
        return counts

    def ids_by_class(self) -> dict[int, list[str]]:
        grouped: dict[int, list[str]] = {c: [] for c in range(self.n_classes)}
        for it in self.items:
            grouped[it.class_label].append(it.item_id)
        return grouped

    def item(self, item_id: str) -> CorpusItem:
        if not hasattr(self, "_index"):
            self._index = {it.item_id: it for it in self.items}
        return self._index[item_id]

    def has_embeddings(self) -> bool:
        return all(isinstance(it.payload, EmbeddingSet) for it in self.items)

    def resolve_class(self, name_or_index: str) -> int:
        """Map a class name, or its integer index, to the label."""
        if name_or_index in self.class_names:
            return self.class_names.index(name_or_index)
        try:
            label = int(name_or_index)
        except ValueError:
            raise DataError(
                f"unknown class '{name_or_index}'; known: {', '.join(self.class_names)}"
            ) from None
        if not 0 <= label < self.n_classes:
            raise DataError(f"class index {label} outside [0, {self.n_classes})")
        return label


@dataclass(frozen=True)
class EpisodeSplit:
    """One episode: per-class support ids, flat query ids, and the seed that made them."""

    support: dict[int, list[str]]
    query: list[str]
    shots_k: int
    seed: int

    def __post_init__(self):
        qset = set(self.query)
        for label, ids in self.support.items():
            if len(ids) != self.shots_k:
                raise DataError(f"class {label} has {len(ids)} support items, expected shots_k={self.shots_k}")
            if qset & set(ids):
                raise DataError(f"class {label}: support and query overlap")

    def support_ids(self) -> list[str]:
        out: list[str] = []
        for label in sorted(self.support):
            out.extend(self.support[label])
        return out


def load_corpus(root: str | Path, format: str = "auto", skip_corrupt: bool = False) -> LabeledCorpus:
    """Load a labeled corpus.

    format: 'image_folders' (one subdirectory per class), 'embedding_file'
    (binary .fsle or single-vector CSV), 'index' (JSON index written by
    `fsl ingest`), or 'auto' to dispatch on the path.
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"no such path: {root}")
    if format == "auto":
        if root.is_dir():
            format = "image_folders"
        elif root.suffix == ".json":
            format = "index"
        else:
            format = "embedding_file"

    if format == "image_folders":
        return _load_image_folders(root, skip_corrupt=skip_corrupt)
    if format == "index":
        return _load_index(root)
    if format == "embedding_file":
        from . import formats

        if root.suffix.lower() == ".csv":
            return formats.read_embedding_csv(root)
        return formats.read_embedding_corpus(root)
    raise DataError(f"unknown corpus format '{format}'")


def _load_image_folders(root: Path, skip_corrupt: bool = False) -> LabeledCorpus:
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DataError(f"{root}: expected one subdirectory per class, found {len(class_dirs)}")
    class_names = [p.name for p in class_dirs]
    items: list[CorpusItem] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        kept = 0
        for f in files:
            if not _decodable(f):
                if skip_corrupt:
                    log.warning("skipping undecodable image %s", f)
                    continue
                raise DataError(f"corrupt image file: {f}")
            items.append(CorpusItem(str(f.relative_to(root)), label, ImageRef(f)))
            kept += 1
        if kept == 0:
            raise DataError(f"class '{cdir.name}' has 0 items")
    return LabeledCorpus(items, class_names)


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError):
        return False


def _load_index(path: Path) -> LabeledCorpus:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    try:
        class_names = list(doc["class_names"])
        base = Path(doc.get("root", path.parent))
        items = [
            CorpusItem(e["id"], int(e["label"]), ImageRef(base / e["path"]))
            for e in doc["items"]
        ]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed corpus index ({exc})") from exc
    return LabeledCorpus(items, class_names)


def write_index(corpus: LabeledCorpus, path: str | Path, root: Path | None = None) -> None:
    """Write a JSON index of an image corpus (ids, labels, relative paths)."""
    path = Path(path)
    entries = []
    for it in corpus.items:
        if not isinstance(it.payload, ImageRef):
            raise DataError("corpus index holds image paths; use the embedding container for embeddings")
        p = it.payload.path
        entries.append({"id": it.item_id, "label": it.class_label, "path": str(p.relative_to(root) if root else p)})
    doc = {"class_names": corpus.class_names, "items": entries}
    if root is not None:
        doc["root"] = str(root)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def preprocess_image(ref: ImageRef) -> np.ndarray:
    """Decode, resize bilinearly to target_size, scale to [0,1], channel-standardize.

    Returns a float64 array of shape (height, width, 3). Grayscale inputs are
    replicated across the three channels before standardization.
    """
    try:
        with Image.open(ref.path) as im:
            im = im.convert("RGB")
            h, w = ref.target_size
            if im.size != (w, h):
                im = im.resize((w, h), Image.Resampling.BILINEAR)
            arr = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {ref.path}: {exc}") from exc
    return standardize_pixels(arr / 255.0)


def standardize_pixels(scaled: np.ndarray) -> np.ndarray:
    """Channel-standardize an array already scaled to [0,1], shape (H, W, 3)."""
    return (scaled - CHANNEL_MEAN) / CHANNEL_STD


def unstandardize_pixels(tensor: np.ndarray) -> np.ndarray:
    return tensor * CHANNEL_STD + CHANNEL_MEAN


def make_split(
    corpus: LabeledCorpus,
    classes: list[int],
    shots_k: int,
    test_fraction: float = 0.2,
    seed: int = 0,
    group_of=None,
) -> EpisodeSplit:
    """Sequester a per-class test fraction as the query set, then draw
    shots_k support items uniformly without replacement from the remainder.

    Deterministic: (corpus, classes, shots_k, test_fraction, seed) fully
    determine the split. Query counts are floor(n * test_fraction), min 1.

    group_of optionally maps an item id to a group key (e.g. the source
    clip); whole groups are then sequestered together, so no group
    straddles the support/query boundary. Grouped query sets may exceed
    the target count by up to one group.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0,1), got {test_fraction}")
    if shots_k < 1:
        raise DataError(f"shots_k must be positive, got {shots_k}")
    grouped = corpus.ids_by_class()
    rng = np.random.default_rng(seed)
    support: dict[int, list[str]] = {}
    query: list[str] = []
    for label in sorted(classes):
        if not 0 <= label < corpus.n_classes:
            raise DataError(f"class label {label} outside [0, {corpus.n_classes})")
        ids = sorted(grouped.get(label, []))  # container order must not matter
        n = len(ids)
        n_query = max(1, math.floor(n * test_fraction))
        if group_of is None:
            perm = rng.permutation(n)
            ordered = [ids[i] for i in perm]
            query_ids = ordered[:n_query]
            remainder = ordered[n_query:]
        else:
            query_ids, remainder = _grouped_partition(ids, n_query, rng, group_of)
        if len(remainder) < shots_k:
            raise DataError(
                f"class '{corpus.class_names[label]}': {n} items leave {len(remainder)} "
                f"after the {test_fraction:.0%} query split, need shots_k={shots_k}"
            )
        query.extend(sorted(query_ids))
        support[label] = sorted(remainder[:shots_k])
    return EpisodeSplit(support=support, query=query, shots_k=shots_k, seed=seed)


def _grouped_partition(ids, n_query, rng, group_of):
    """Sequester whole groups until the query target is reached; the
    remainder is a permutation of the other groups' items."""
    groups: dict[str, list[str]] = {}
    for item_id in ids:
        groups.setdefault(str(group_of(item_id)), []).append(item_id)
    names = sorted(groups)
    order = rng.permutation(len(names))
    query_ids: list[str] = []
    rest: list[str] = []
    for idx in order:
        bucket = groups[names[idx]]
        if len(query_ids) < n_query:
            query_ids.extend(bucket)
        else:
            rest.extend(bucket)
    rest_perm = rng.permutation(len(rest))
    return query_ids, [rest[i] for i in rest_perm]


def subcorpus(corpus: LabeledCorpus, labels: list[int]) -> LabeledCorpus:
    """Restrict a corpus to the given classes, relabeling to 0..len(labels)-1
    in the order given (scenario order, not sorted)."""
    remap = {old: new for new, old in enumerate(labels)}
    items = [
        CorpusItem(it.item_id, remap[it.class_label], it.payload)
        for it in corpus.items
        if it.class_label in remap
    ]
    names = [corpus.class_names[old] for old in labels]
    return LabeledCorpus(items, names)
