"""Embedding providers: turn a preprocessed image tensor into a set of
latent activation vectors, one per spatial location.

Two providers exist. OnnxBackbone taps a named layer of a pretrained
convolutional network stored as an ONNX file (requires onnxruntime, imported
lazily). GridProjectionBackbone is a self-contained seeded featurizer (block
pooling followed by a fixed random projection and tanh) used for synthetic
corpora and tests; it needs no model file.
"""

from __future__ import annotations

import concurrent.futures
import logging
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CorpusItem, EmbeddingSet, ImageRef, LabeledCorpus, preprocess_image
from .errors import DataError

log = logging.getLogger(__name__)


class GridProjectionBackbone:
    """Deterministic conv-like featurizer: the image is cut into a
    grid_size x grid_size block grid; each block is flattened and passed
    through a fixed seeded linear map with tanh. n_locations = grid_size**2
    (or 1 when pooled)."""

    def __init__(self, grid_size: int = 4, d_latent: int = 32, seed: int = 0,
                 input_spec: tuple[int, int, int] = (224, 224, 3), pooled: bool = False):
        h, w, c = input_spec
        if h % grid_size or w % grid_size:
            raise DataError(f"grid_size {grid_size} must divide input size {h}x{w}")
        self.grid_size = grid_size
        self.input_spec = input_spec
        self.pooled = pooled
        self.seed = seed
        self._block = (h // grid_size, w // grid_size)
        n_in = self._block[0] * self._block[1] * c
        rng = np.random.default_rng(seed)
        self._w = rng.normal(scale=1.0 / np.sqrt(n_in), size=(d_latent, n_in))
        self._b = rng.normal(scale=0.1, size=d_latent)
        self.d_latent = d_latent

    @property
    def n_locations(self) -> int:
        return 1 if self.pooled else self.grid_size**2

    def describe(self) -> dict:
        return {
            "kind": "grid",
            "grid_size": self.grid_size,
            "d_latent": self.d_latent,
            "seed": self.seed,
            "pooled": self.pooled,
            "input_spec": list(self.input_spec),
        }

    def embed_tensor(self, image: np.ndarray, source_id: str = "") -> EmbeddingSet:
        h, w, c = self.input_spec
        if image.shape != (h, w, c):
            raise DataError(f"image shape {image.shape} != input spec {(h, w, c)}")
        bh, bw = self._block
        vectors = np.empty((self.grid_size**2, self.d_latent))
        k = 0
        for i in range(self.grid_size):
            for j in range(self.grid_size):
                block = image[i * bh : (i + 1) * bh, j * bw : (j + 1) * bw, :]
                vectors[k] = np.tanh(self._w @ block.ravel() + self._b)
                k += 1
        if self.pooled:
            vectors = vectors.mean(axis=0, keepdims=True)
        return EmbeddingSet(vectors.astype(np.float32), source_id)


@dataclass(frozen=True)
class BackboneHandle:
    """Configuration of an ONNX-backed provider: which file, which layer."""

    model_path: Path
    tap_layer: str
    input_spec: tuple[int, int, int] = (224, 224, 3)
    pooled: bool = False


class OnnxBackbone:
    """Taps the named layer of an ONNX network. The activation grid is
    flattened so every spatial position yields one d_latent vector."""

    def __init__(self, handle: BackboneHandle):
        self.handle = handle
        self._lock = threading.Lock()
        self._session = self._build_session()
        probe = np.zeros(handle.input_spec, dtype=np.float64)
        probed = self.embed_tensor(probe, source_id="probe")
        self.n_locations = probed.n_locations
        self.d_latent = probed.d_latent

    @property
    def input_spec(self) -> tuple[int, int, int]:
        return self.handle.input_spec

    def describe(self) -> dict:
        return {
            "kind": "onnx",
            "model_path": str(self.handle.model_path),
            "tap_layer": self.handle.tap_layer,
            "pooled": self.handle.pooled,
            "input_spec": list(self.handle.input_spec),
        }

    def _build_session(self):
        try:
            import onnxruntime as ort
        except ImportError:
            raise DataError(
                "onnxruntime is not installed; install the [onnx] extra to use an "
                "ONNX backbone, or supply precomputed embeddings"
            ) from None
        path = Path(self.handle.model_path)
        if not path.exists():
            raise DataError(f"no such model file: {path}")
        model_bytes = path.read_bytes()
        tap = self.handle.tap_layer

        session = ort.InferenceSession(model_bytes, providers=["CPUExecutionProvider"])
        outputs = [o.name for o in session.get_outputs()]
        if tap in outputs:
            return session

        # the tap is an internal value: expose it as a graph output
        try:
            import onnx
        except ImportError:
            raise DataError(
                f"layer '{tap}' is not a graph output and the onnx package is not "
                "installed to expose it; re-export the model with the tap as an output"
            ) from None
        model = onnx.load_from_string(model_bytes)
        known = {vi.name for vi in model.graph.value_info}
        known.update(o.name for node in model.graph.node for o in node.output)
        if tap not in known:
            raise DataError(f"layer '{tap}' not found in the model graph")
        model.graph.output.append(onnx.helper.make_empty_tensor_value_info(tap))
        return ort.InferenceSession(model.SerializeToString(), providers=["CPUExecutionProvider"])

    def embed_tensor(self, image: np.ndarray, source_id: str = "") -> EmbeddingSet:
        h, w, c = self.handle.input_spec
        if image.shape != (h, w, c):
            raise DataError(f"image shape {image.shape} != input spec {(h, w, c)}")
        batch = np.transpose(image, (2, 0, 1))[None, ...].astype(np.float32)
        input_name = self._session.get_inputs()[0].name
        with self._lock:
            (activations,) = self._session.run([self.handle.tap_layer], {input_name: batch})
        activations = np.asarray(activations)
        if activations.ndim == 4:  # (1, channels, h', w') -> (h'*w', channels)
            _, ch, hh, ww = activations.shape
            vectors = activations[0].reshape(ch, hh * ww).T
        elif activations.ndim == 2:  # (1, d)
            vectors = activations
        else:
            raise DataError(f"cannot interpret tap output of shape {activations.shape}")
        if not np.all(np.isfinite(vectors)):
            raise DataError(f"non-finite activations from '{self.handle.tap_layer}' (corrupted model?)")
        if self.handle.pooled:
            vectors = vectors.mean(axis=0, keepdims=True)
        return EmbeddingSet(vectors.astype(np.float32), source_id)


def embed(backbone, image: np.ndarray, source_id: str = "") -> EmbeddingSet:
    """Forward pass of one preprocessed image through the provider."""
    return backbone.embed_tensor(image, source_id=source_id)


def embed_corpus(
    backbone,
    corpus: LabeledCorpus,
    skip_corrupt: bool = False,
    threads: int = 1,
) -> LabeledCorpus:
    """Embed every ImageRef item, preserving order and ids.

    Errors carry the item id; with skip_corrupt, undecodable items are
    dropped with a warning instead.
    """

    def one(it: CorpusItem) -> CorpusItem | None:
        if not isinstance(it.payload, ImageRef):
            raise DataError(f"item '{it.item_id}' already holds an embedding")
        try:
            tensor = preprocess_image(it.payload)
        except DataError as exc:
            if skip_corrupt:
                log.warning("skipping '%s': %s", it.item_id, exc)
                return None
            raise DataError(f"item '{it.item_id}': {exc}") from exc
        return CorpusItem(it.item_id, it.class_label, embed(backbone, tensor, source_id=it.item_id))

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, corpus.items))
    else:
        results = []
        for i, it in enumerate(corpus.items, start=1):
            results.append(one(it))
            if i % 50 == 0 or i == len(corpus.items):
                log.info("embedded %d/%d items", i, len(corpus.items))
    items = [r for r in results if r is not None]
    return LabeledCorpus(items, corpus.class_names)


def backbone_from_config(config) -> GridProjectionBackbone | OnnxBackbone:
    """Instantiate the provider named by a RunConfig."""
    if not config.backbone:
        raise DataError("no backbone configured; pass an ONNX model path or 'grid'")
    tap = config.tap
    pooled = tap == "pooled"
    if tap.endswith(":pooled"):  # ONNX: pool the tapped activation grid
        tap, pooled = tap[: -len(":pooled")], True
    if config.backbone == "grid":
        return GridProjectionBackbone(
            grid_size=config.grid_size,
            d_latent=config.grid_d_latent,
            seed=config.grid_seed,
            pooled=pooled,
        )
    if not tap or tap == "pooled":
        raise DataError("an ONNX backbone needs --tap LAYER (optionally LAYER:pooled)")
    handle = BackboneHandle(
        model_path=Path(config.backbone),
        tap_layer=tap,
        pooled=pooled,
    )
    return OnnxBackbone(handle)


def backbone_from_description(desc: dict) -> GridProjectionBackbone | OnnxBackbone:
    """Rebuild a provider from a model-manifest description."""
    kind = desc.get("kind")
    if kind == "grid":
        return GridProjectionBackbone(
            grid_size=int(desc["grid_size"]),
            d_latent=int(desc["d_latent"]),
            seed=int(desc["seed"]),
            input_spec=tuple(desc.get("input_spec", (224, 224, 3))),
            pooled=bool(desc.get("pooled", False)),
        )
    if kind == "onnx":
        return OnnxBackbone(
            BackboneHandle(
                model_path=Path(desc["model_path"]),
                tap_layer=desc["tap_layer"],
                input_spec=tuple(desc.get("input_spec", (224, 224, 3))),
                pooled=bool(desc.get("pooled", False)),
            )
        )
    raise DataError(f"unknown backbone kind '{kind}'")
