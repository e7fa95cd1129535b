"""Binary containers: embedding corpus files and sectioned model files."""

import numpy as np
import pytest

from fslkit import formats
from fslkit.corpus import CorpusItem, EmbeddingSet, LabeledCorpus
from fslkit.errors import DataError


def corpus_fixture(n_locations=3, d_latent=4):
    rng = np.random.default_rng(0)
    items = []
    for c in range(2):
        for i in range(3):
            item_id = f"c{c}/item_{i}"
            vectors = rng.normal(size=(n_locations, d_latent)).astype(np.float32)
            items.append(CorpusItem(item_id, c, EmbeddingSet(vectors, item_id)))
    return LabeledCorpus(items, ["a", "b"])


def test_embedding_corpus_round_trip(tmp_path):
    corpus = corpus_fixture()
    path = tmp_path / "c.fsle"
    formats.write_embedding_corpus(corpus, path)
    loaded = formats.read_embedding_corpus(path)
    assert loaded.n_classes == 2
    for a, b in zip(corpus.items, loaded.items):
        assert a.item_id == b.item_id
        assert a.class_label == b.class_label
        assert np.array_equal(a.payload.vectors, b.payload.vectors)


def test_embedding_corpus_magic_and_header(tmp_path):
    corpus = corpus_fixture()
    path = tmp_path / "c.fsle"
    formats.write_embedding_corpus(corpus, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FSLE"
    header = np.frombuffer(raw[4:24], dtype="<u4")
    assert list(header) == [1, 6, 3, 4, 2]  # version, items, vectors/item, d_latent, classes


def test_embedding_corpus_bad_magic(tmp_path):
    path = tmp_path / "bad.fsle"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(DataError, match="bad magic"):
        formats.read_embedding_corpus(path)


def test_embedding_corpus_truncated(tmp_path):
    corpus = corpus_fixture()
    path = tmp_path / "c.fsle"
    formats.write_embedding_corpus(corpus, path)
    (tmp_path / "t.fsle").write_bytes(path.read_bytes()[:40])
    with pytest.raises(DataError, match="truncated"):
        formats.read_embedding_corpus(tmp_path / "t.fsle")


def test_embedding_corpus_requires_constant_locations(tmp_path):
    items = [
        CorpusItem("a", 0, EmbeddingSet(np.ones((2, 3), dtype=np.float32), "a")),
        CorpusItem("b", 1, EmbeddingSet(np.ones((3, 3), dtype=np.float32), "b")),
    ]
    corpus = LabeledCorpus(items, ["x", "y"])
    with pytest.raises(DataError, match="vectors"):
        formats.write_embedding_corpus(corpus, tmp_path / "c.fsle")


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    items = []
    for c in range(2):
        for i in range(2):
            item_id = f"c{c}_{i}"
            items.append(CorpusItem(item_id, c, EmbeddingSet(
                rng.normal(size=(1, 5)).astype(np.float32), item_id)))
    corpus = LabeledCorpus(items, ["a", "b"])
    path = tmp_path / "c.csv"
    formats.write_embedding_csv(corpus, path)
    loaded = formats.read_embedding_csv(path)
    for a, b in zip(corpus.items, loaded.items):
        assert a.item_id == b.item_id
        assert np.array_equal(a.payload.vectors, b.payload.vectors)


def test_csv_rejects_ragged_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,0,1.0,2.0\nb,1,1.0\n")
    with pytest.raises(DataError, match="vector length"):
        formats.read_embedding_csv(path)


def test_pack_block_round_trip():
    meta = {"alpha": 1, "name": "x"}
    arrays = {
        "f32": np.arange(6, dtype="<f4").reshape(2, 3),
        "f64": np.linspace(0, 1, 4).astype("<f8"),
        "ints": np.array([1, 2, 3], dtype="<i8"),
    }
    blob = formats.pack_block(meta, arrays)
    meta2, arrays2 = formats.unpack_block(blob)
    assert meta2 == meta
    for k in arrays:
        assert np.array_equal(arrays2[k], arrays[k])
        assert arrays2[k].dtype == arrays[k].dtype


def test_pack_block_deterministic():
    arrays = {"b": np.ones(2, dtype="<f8"), "a": np.zeros(3, dtype="<f4")}
    assert formats.pack_block({"k": 1}, arrays) == formats.pack_block({"k": 1}, dict(reversed(arrays.items())))


def test_model_file_round_trip(tmp_path):
    manifest = {"format": "fsl-model", "seed": 7}
    sections = {
        formats.SECTION_PCA: b"pca-bytes",
        formats.SECTION_LDA: b"lda-bytes",
    }
    path = tmp_path / "m.fsl"
    formats.write_model_file(path, manifest, sections)
    manifest2, sections2 = formats.read_model_file(path)
    assert manifest2 == manifest
    assert sections2 == sections


def test_model_file_bad_magic(tmp_path):
    path = tmp_path / "bad.fsl"
    path.write_bytes(b"XXXX\0\0\0\0")
    with pytest.raises(DataError, match="bad magic"):
        formats.read_model_file(path)
