"""Corpus loading, image preprocessing, and episode splits."""

import os

import numpy as np
import pytest
from PIL import Image

from fslkit.corpus import (
    CHANNEL_MEAN,
    CHANNEL_STD,
    CorpusItem,
    EmbeddingSet,
    ImageRef,
    LabeledCorpus,
    load_corpus,
    make_split,
    preprocess_image,
    unstandardize_pixels,
)
from fslkit.errors import DataError
from fslkit import formats


def write_png(path, array_u8):
    Image.fromarray(array_u8).save(path)


def make_image_tree(root, counts, size=32):
    rng = np.random.default_rng(0)
    for name, n in counts.items():
        (root / name).mkdir(parents=True)
        for i in range(n):
            img = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
            write_png(root / name / f"{i:03d}.png", img)


def synthetic_embedding_corpus(n_per_class=3, d_latent=5):
    rng = np.random.default_rng(1)
    items = []
    for c in range(2):
        for i in range(n_per_class):
            item_id = f"c{c}_{i}"
            vectors = rng.normal(size=(2, d_latent)).astype(np.float32)
            items.append(CorpusItem(item_id, c, EmbeddingSet(vectors, item_id)))
    return LabeledCorpus(items, ["neg", "pos"])


# ---------------------------------------------------------------------------
# loading


def test_load_image_folders(tmp_path):
    make_image_tree(tmp_path, {"healthy": 4, "covid": 3})
    corpus = load_corpus(tmp_path, format="image_folders")
    assert corpus.class_names == ["covid", "healthy"]  # lexicographic
    assert corpus.class_counts() == {0: 3, 1: 4}
    ids = [it.item_id for it in corpus.items]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)


def test_load_empty_class_errors(tmp_path):
    make_image_tree(tmp_path, {"a": 2})
    (tmp_path / "b").mkdir()
    with pytest.raises(DataError, match="'b' has 0 items"):
        load_corpus(tmp_path, format="image_folders")


def test_load_missing_directory():
    with pytest.raises(DataError, match="no such path"):
        load_corpus("/nonexistent/place")


def test_load_corrupt_image_skippable(tmp_path):
    make_image_tree(tmp_path, {"a": 2, "b": 2})
    (tmp_path / "a" / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="bad.png"):
        load_corpus(tmp_path, format="image_folders")
    corpus = load_corpus(tmp_path, format="image_folders", skip_corrupt=True)
    assert corpus.class_counts() == {0: 2, 1: 2}


def test_embedding_fixture_round_trip(tmp_path):
    corpus = synthetic_embedding_corpus()
    path = tmp_path / "corpus.fsle"
    formats.write_embedding_corpus(corpus, path)
    loaded = load_corpus(path, format="embedding_file")
    assert loaded.n_classes == 2
    assert len(loaded.items) == 6
    for original, read in zip(corpus.items, loaded.items):
        assert read.item_id == original.item_id
        assert read.class_label == original.class_label
        assert np.array_equal(read.payload.vectors, original.payload.vectors)


def test_duplicate_ids_rejected():
    e = EmbeddingSet(np.ones((1, 2), dtype=np.float32), "x")
    with pytest.raises(DataError, match="duplicate"):
        LabeledCorpus([CorpusItem("x", 0, e), CorpusItem("x", 1, e)], ["a", "b"])


def test_inconsistent_dimensions_rejected():
    items = [
        CorpusItem("a", 0, EmbeddingSet(np.ones((1, 2), dtype=np.float32), "a")),
        CorpusItem("b", 1, EmbeddingSet(np.ones((1, 3), dtype=np.float32), "b")),
    ]
    with pytest.raises(DataError, match="latent dimension"):
        LabeledCorpus(items, ["a", "b"])


def test_one_class_rejected():
    e = EmbeddingSet(np.ones((1, 2), dtype=np.float32), "x")
    with pytest.raises(DataError, match="at least 2"):
        LabeledCorpus([CorpusItem("x", 0, e)], ["only"])


# ---------------------------------------------------------------------------
# preprocessing


def bilinear_oracle(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent 4-neighbor bilinear resampler (half-pixel centers)."""
    in_h, in_w = src.shape[:2]
    out = np.zeros((out_h, out_w, src.shape[2]))
    for oy in range(out_h):
        sy = (oy + 0.5) * in_h / out_h - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = np.clip(y0, 0, in_h - 1), np.clip(y0 + 1, 0, in_h - 1)
        for ox in range(out_w):
            sx = (ox + 0.5) * in_w / out_w - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = np.clip(x0, 0, in_w - 1), np.clip(x0 + 1, 0, in_w - 1)
            out[oy, ox] = (
                src[y0c, x0c] * (1 - fy) * (1 - fx)
                + src[y0c, x1c] * (1 - fy) * fx
                + src[y1c, x0c] * fy * (1 - fx)
                + src[y1c, x1c] * fy * fx
            )
    return out


def test_preprocess_identity_size(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.integers(0, 255, size=(224, 224, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    write_png(path, img)
    out = preprocess_image(ImageRef(path))
    assert out.shape == (224, 224, 3)
    expected = (img / 255.0 - CHANNEL_MEAN) / CHANNEL_STD
    assert np.allclose(out, expected, atol=1e-12)


def test_preprocess_constant_image(tmp_path):
    img = np.full((448, 448, 3), 117, dtype=np.uint8)
    path = tmp_path / "const.png"
    write_png(path, img)
    out = preprocess_image(ImageRef(path))
    expected = (117 / 255.0 - CHANNEL_MEAN) / CHANNEL_STD
    assert out.shape == (224, 224, 3)
    assert np.allclose(out, expected[None, None, :], atol=1e-12)


def test_preprocess_gradient_matches_oracle(tmp_path):
    ys = np.linspace(0, 200, 300)[:, None]
    xs = np.linspace(0, 55, 400)[None, :]
    gradient = np.clip(ys + xs, 0, 255).astype(np.uint8)
    img = np.repeat(gradient[:, :, None], 3, axis=2)
    path = tmp_path / "grad.png"
    write_png(path, img)
    got = unstandardize_pixels(preprocess_image(ImageRef(path)))
    expected = bilinear_oracle(img / 255.0, 224, 224)
    assert np.max(np.abs(got - expected)) < 1e-2


def test_preprocess_grayscale_replicates(tmp_path):
    img = np.full((224, 224), 80, dtype=np.uint8)
    path = tmp_path / "gray.png"
    write_png(path, img)
    out = preprocess_image(ImageRef(path))
    assert out.shape == (224, 224, 3)
    expected = (80 / 255.0 - CHANNEL_MEAN) / CHANNEL_STD
    assert np.allclose(out, expected[None, None, :], atol=1e-12)


def test_preprocess_undecodable(tmp_path):
    path = tmp_path / "junk.png"
    path.write_bytes(b"junk")
    with pytest.raises(DataError, match="cannot decode"):
        preprocess_image(ImageRef(path))


# ---------------------------------------------------------------------------
# splits


def counted_corpus(counts):
    items = []
    for c, n in enumerate(counts):
        for i in range(n):
            item_id = f"c{c}/{i:04d}"
            items.append(CorpusItem(item_id, c, EmbeddingSet(
                np.full((1, 3), float(c), dtype=np.float32), item_id)))
    return LabeledCorpus(items, [f"class_{c}" for c in range(len(counts))])


def test_split_20pct_query_count():
    corpus = counted_corpus([315, 50])
    split = make_split(corpus, [0, 1], shots_k=8, test_fraction=0.2, seed=0)
    class0_query = [q for q in split.query if q.startswith("c0/")]
    assert len(class0_query) == 63  # floor(315 * 0.2)
    assert len(split.query) == 63 + 10


def test_split_boundary_support_is_entire_remainder():
    corpus = counted_corpus([10, 10])
    split = make_split(corpus, [0, 1], shots_k=8, test_fraction=0.2, seed=1)
    assert all(len(v) == 8 for v in split.support.values())  # 10 - 2 query


def test_split_identical_seed_identical_split():
    corpus = counted_corpus([40, 40])
    s1 = make_split(corpus, [0, 1], shots_k=8, seed=99)
    s2 = make_split(corpus, [0, 1], shots_k=8, seed=99)
    assert s1 == s2


def test_split_different_seeds_differ():
    corpus = counted_corpus([40, 40])
    s1 = make_split(corpus, [0, 1], shots_k=8, seed=1)
    s2 = make_split(corpus, [0, 1], shots_k=8, seed=2)
    assert s1.support != s2.support


@pytest.mark.parametrize("seed", range(10))
def test_split_disjoint_and_balanced(seed):
    corpus = counted_corpus([37, 81, 25])
    split = make_split(corpus, [0, 1, 2], shots_k=5, seed=seed)
    support_ids = set(split.support_ids())
    assert support_ids.isdisjoint(split.query)
    assert all(len(v) == 5 for v in split.support.values())
    for q in split.query:
        label = corpus.item(q).class_label
        assert label in split.support


def test_split_insufficient_items():
    corpus = counted_corpus([10, 10])
    with pytest.raises(DataError, match="class_0"):
        make_split(corpus, [0, 1], shots_k=9, test_fraction=0.2, seed=0)


def test_split_min_one_query():
    corpus = counted_corpus([4, 4])
    split = make_split(corpus, [0, 1], shots_k=2, test_fraction=0.2, seed=0)
    # floor(4*0.2) = 0, bumped to the minimum of 1
    assert len(split.query) == 2


@pytest.mark.parametrize("seed", range(5))
def test_split_grouping_key_keeps_clips_together(seed):
    # 8 clips x 5 frames per class; no clip may straddle support and query
    items = []
    for c in range(2):
        for clip in range(8):
            for frame in range(5):
                item_id = f"c{c}/clip{clip:02d}_f{frame}"
                items.append(CorpusItem(item_id, c, EmbeddingSet(
                    np.full((1, 3), float(c), dtype=np.float32), item_id)))
    corpus = LabeledCorpus(items, ["a", "b"])
    clip_of = lambda item_id: item_id.split("_f")[0]
    split = make_split(corpus, [0, 1], shots_k=8, seed=seed, group_of=clip_of)
    support_clips = {clip_of(i) for i in split.support_ids()}
    query_clips = {clip_of(i) for i in split.query}
    assert support_clips.isdisjoint(query_clips)
    assert all(len(v) == 8 for v in split.support.values())
    assert len(split.query) >= 2 * 8  # target floor(40 * 0.2) per class, whole clips


# optional: the public POCUS frame counts, exercised only when a local copy
# is supplied via FSL_POCUS_DIR (one folder per class: normal/pneumonia/covid)
@pytest.mark.skipif("FSL_POCUS_DIR" not in os.environ, reason="POCUS dataset not supplied")
def test_pocus_linear_frame_counts():
    corpus = load_corpus(os.environ["FSL_POCUS_DIR"], format="image_folders")
    counts = {corpus.class_names[k]: v for k, v in corpus.class_counts().items()}
    assert counts["normal"] == 1457
    assert counts["pneumonia"] == 315
    assert counts["covid"] == 445
