"""Binary containers: the FSLE embedding corpus and the sectioned model file.

All integers are little-endian. Embedding corpus layout:

    magic b"FSLE" | u32 version=1 | u32 item_count | u32 vectors_per_item
    | u32 d_latent | u32 class_count
    then per item: u32 id_len | id utf-8 | u32 label
    | vectors_per_item * d_latent float32

A CSV alternative (one row = id, label, flattened vector) is accepted for
single-vector items.

Model files share the conventions: magic b"FSLM" | u32 version | u32
manifest_len | manifest JSON, then tagged sections ("PCA\\0", "VOCB",
"DICT", "LDA\\0"), each: 4-byte tag | u64 payload length | payload.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .corpus import CorpusItem, EmbeddingSet, LabeledCorpus
from .errors import DataError

EMBEDDING_MAGIC = b"FSLE"
MODEL_MAGIC = b"FSLM"
VERSION = 1

SECTION_PCA = b"PCA\0"
SECTION_VOCAB = b"VOCB"
SECTION_DICT = b"DICT"
SECTION_LDA = b"LDA\0"

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<u4", 3: "<i8"}
_DTYPE_TO_CODE = {v: k for k, v in _DTYPE_CODES.items()}


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise DataError("truncated file: expected u32")
    return struct.unpack("<I", raw)[0]


def _read_exact(f, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise DataError(f"truncated file: expected {n} bytes, got {len(raw)}")
    return raw


# ---------------------------------------------------------------------------
# Embedding corpus container

def write_embedding_corpus(corpus: LabeledCorpus, path: str | Path) -> None:
    """Write a corpus of EmbeddingSet payloads; values stored float32."""
    sets = []
    for it in corpus.items:
        if not isinstance(it.payload, EmbeddingSet):
            raise DataError(f"item '{it.item_id}' has no embedding; run embed first")
        sets.append(it)
    if not sets:
        raise DataError("empty corpus")
    vpi = sets[0].payload.n_locations
    d_latent = sets[0].payload.d_latent
    for it in sets:
        if it.payload.n_locations != vpi:
            raise DataError(
                f"item '{it.item_id}' has {it.payload.n_locations} vectors, expected {vpi}"
            )
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(_u32(VERSION))
        f.write(_u32(len(sets)))
        f.write(_u32(vpi))
        f.write(_u32(d_latent))
        f.write(_u32(corpus.n_classes))
        for it in sets:
            idb = it.item_id.encode("utf-8")
            f.write(_u32(len(idb)))
            f.write(idb)
            f.write(_u32(it.class_label))
            f.write(np.ascontiguousarray(it.payload.vectors, dtype="<f4").tobytes())


def read_embedding_corpus(path: str | Path, class_names: list[str] | None = None) -> LabeledCorpus:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMBEDDING_MAGIC:
            raise DataError(f"{path}: not an embedding corpus (bad magic {magic!r})")
        version = _read_u32(f)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        item_count = _read_u32(f)
        vpi = _read_u32(f)
        d_latent = _read_u32(f)
        class_count = _read_u32(f)
        if class_names is None:
            class_names = [f"class_{c}" for c in range(class_count)]
        elif len(class_names) != class_count:
            raise DataError(f"{path}: file has {class_count} classes, got {len(class_names)} names")
        items: list[CorpusItem] = []
        n_values = vpi * d_latent
        for _ in range(item_count):
            id_len = _read_u32(f)
            item_id = _read_exact(f, id_len).decode("utf-8")
            label = _read_u32(f)
            raw = _read_exact(f, 4 * n_values)
            vectors = np.frombuffer(raw, dtype="<f4").reshape(vpi, d_latent).copy()
            items.append(CorpusItem(item_id, label, EmbeddingSet(vectors, item_id)))
    return LabeledCorpus(items, class_names)


def read_embedding_csv(path: str | Path, class_names: list[str] | None = None) -> LabeledCorpus:
    """CSV rows: id, label, v0, v1, ... (one vector per item)."""
    items: list[CorpusItem] = []
    max_label = -1
    d_latent: int | None = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected id,label,values...")
            item_id = parts[0].strip()
            try:
                label = int(parts[1])
                values = np.array([float(x) for x in parts[2:]], dtype=np.float32)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if d_latent is None:
                d_latent = values.size
            elif values.size != d_latent:
                raise DataError(f"{path}:{lineno}: vector length {values.size}, expected {d_latent}")
            max_label = max(max_label, label)
            items.append(CorpusItem(item_id, label, EmbeddingSet(values.reshape(1, -1), item_id)))
    if not items:
        raise DataError(f"{path}: no rows")
    if class_names is None:
        class_names = [f"class_{c}" for c in range(max_label + 1)]
    return LabeledCorpus(items, class_names)


def read_signature_csv(path: str | Path) -> list[tuple[str, int, np.ndarray]]:
    """Signature rows (id, label, float64 vector); same layout as the
    embedding CSV but parsed at full precision so unit norms survive."""
    rows: list[tuple[str, int, np.ndarray]] = []
    dim: int | None = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected id,label,values...")
            try:
                label = int(parts[1])
                values = np.array([float(x) for x in parts[2:]], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if dim is None:
                dim = values.size
            elif values.size != dim:
                raise DataError(f"{path}:{lineno}: vector length {values.size}, expected {dim}")
            rows.append((parts[0].strip(), label, values))
    if not rows:
        raise DataError(f"{path}: no rows")
    return rows


def write_embedding_csv(corpus: LabeledCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in corpus.items:
            if not isinstance(it.payload, EmbeddingSet) or it.payload.n_locations != 1:
                raise DataError("CSV container holds single-vector items only")
            values = ",".join(repr(float(v)) for v in it.payload.vectors[0])
            f.write(f"{it.item_id},{it.class_label},{values}\n")


# ---------------------------------------------------------------------------
# Tagged array blocks (shared by all model-file sections)

def pack_block(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize scalars (JSON) plus named arrays, deterministically ordered."""
    buf = io.BytesIO()
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(_u32(len(meta_b)))
    buf.write(meta_b)
    buf.write(_u32(len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        name_b = name.encode("utf-8")
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPE_TO_CODE:
            raise DataError(f"unsupported array dtype {arr.dtype} for '{name}'")
        buf.write(_u32(len(name_b)))
        buf.write(name_b)
        buf.write(_u32(_DTYPE_TO_CODE[dtype]))
        buf.write(_u32(arr.ndim))
        for dim in arr.shape:
            buf.write(_u32(dim))
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return buf.getvalue()


def unpack_block(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    f = io.BytesIO(payload)
    meta_len = _read_u32(f)
    meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
    n_arrays = _read_u32(f)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        name_len = _read_u32(f)
        name = _read_exact(f, name_len).decode("utf-8")
        code = _read_u32(f)
        if code not in _DTYPE_CODES:
            raise DataError(f"unknown dtype code {code}")
        dtype = np.dtype(_DTYPE_CODES[code])
        ndim = _read_u32(f)
        shape = tuple(_read_u32(f) for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = _read_exact(f, dtype.itemsize * count)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return meta, arrays


# ---------------------------------------------------------------------------
# Model file: manifest + tagged sections

def write_model_file(path: str | Path, manifest: dict, sections: dict[bytes, bytes]) -> None:
    with open(path, "wb") as f:
        f.write(model_file_bytes(manifest, sections))


def model_file_bytes(manifest: dict, sections: dict[bytes, bytes]) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(_u32(VERSION))
    manifest_b = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf.write(_u32(len(manifest_b)))
    buf.write(manifest_b)
    for tag in sorted(sections):
        payload = sections[tag]
        if len(tag) != 4:
            raise DataError(f"section tag must be 4 bytes, got {tag!r}")
        buf.write(tag)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def read_model_file(path: str | Path) -> tuple[dict, dict[bytes, bytes]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise DataError(f"{path}: not a model file (bad magic {magic!r})")
        version = _read_u32(f)
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        manifest_len = _read_u32(f)
        manifest = json.loads(_read_exact(f, manifest_len).decode("utf-8"))
        sections: dict[bytes, bytes] = {}
        while True:
            tag = f.read(4)
            if not tag:
                break
            if len(tag) != 4:
                raise DataError(f"{path}: truncated section tag")
            length = struct.unpack("<Q", _read_exact(f, 8))[0]
            sections[tag] = _read_exact(f, length)
    return manifest, sections
