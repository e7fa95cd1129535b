"""PCA, k-means vocabulary, and signature encoding."""

import itertools

import numpy as np
import pytest

from fslkit.corpus import EmbeddingSet
from fslkit.encoder import (
    EncoderStack,
    ImageSignature,
    PcaTransform,
    Vocabulary,
    encode,
    fit_pca,
    fit_vocabulary,
    kmeans,
)
from fslkit.errors import DataError, NumericalError

# ---------------------------------------------------------------------------
# PCA


def test_pca_axis_aligned():
    xs = np.array([[1.0, 0.0], [3.0, 0.0], [-2.0, 0.0], [0.5, 0.0], [4.0, 0.0]])
    pca = fit_pca(xs, d_pca=1)
    assert pca.components[0] == pytest.approx([1.0, 0.0], abs=1e-12)
    assert pca.eigenvalues[0] == pytest.approx(np.var(xs[:, 0], ddof=1), abs=1e-12)


def test_pca_diagonal_fixture():
    # hand eigendecomposition: cov = [[10/3, 10/3], [10/3, 10/3]],
    # top eigenvector (1,1)/sqrt(2) with eigenvalue 20/3
    xs = np.array([[1.0, 1.0], [-1.0, -1.0], [2.0, 2.0], [-2.0, -2.0]])
    pca = fit_pca(xs, d_pca=1)
    assert pca.components[0] == pytest.approx([1 / np.sqrt(2), 1 / np.sqrt(2)], abs=1e-12)
    assert pca.eigenvalues[0] == pytest.approx(20.0 / 3.0, abs=1e-12)


def test_pca_full_rank_reconstruction(rng):
    xs = rng.normal(size=(50, 6))
    pca = fit_pca(xs, d_pca=6)
    centered = xs - pca.mean
    reconstructed = pca.transform(xs) @ pca.components
    assert np.allclose(reconstructed, centered, atol=1e-8)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_pca_variance_ordering(seed):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(200, 8)) * rng.uniform(0.5, 3.0, size=8)
    pca = fit_pca(xs, d_pca=5)
    projected = pca.transform(xs)
    variances = projected.var(axis=0, ddof=1)
    assert np.all(np.diff(variances) <= 1e-8)
    assert variances == pytest.approx(pca.eigenvalues, abs=1e-8)


def test_pca_orthonormality(rng):
    xs = rng.normal(size=(100, 10))
    pca = fit_pca(xs, d_pca=7)
    gram = pca.components @ pca.components.T
    assert np.allclose(gram, np.eye(7), atol=1e-8)


def test_pca_sign_convention(rng):
    xs = rng.normal(size=(80, 5))
    pca = fit_pca(xs, d_pca=5)
    for row in pca.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_requires_more_samples_than_components():
    xs = np.eye(4)
    with pytest.raises(DataError):
        fit_pca(xs, d_pca=4)


def test_pca_rank_deficient_errors():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(30, 2))
    xs = np.hstack([base, base @ rng.normal(size=(2, 3))])  # rank 2 in 5 dims
    with pytest.raises(NumericalError, match="rank"):
        fit_pca(xs, d_pca=4)


# ---------------------------------------------------------------------------
# k-means vocabulary

# frozen 8-point fixture; optima computed by exhaustive enumeration below
KMEANS_POINTS = np.array([
    [0.0, 0.0], [0.5, 0.2], [0.3, 0.4],
    [2.1, 1.9], [2.0, 2.3], [2.2, 2.1],
    [4.0, 0.1], [4.2, -0.2],
])
BRUTE_FORCE_OPTIMUM_K3 = 0.3716666666666667
BRUTE_FORCE_OPTIMUM_K2 = 10.718666666666666


def brute_force_inertia(points: np.ndarray, k: int) -> float:
    """Exhaustive search over every assignment of points to k clusters."""
    best = float("inf")
    m = len(points)
    for assign in itertools.product(range(k), repeat=m):
        total = 0.0
        for c in range(k):
            members = points[[i for i in range(m) if assign[i] == c]]
            if len(members):
                mu = members.mean(axis=0)
                total += float(((members - mu) ** 2).sum())
        best = min(best, total)
    return best


def test_kmeans_matches_brute_force_k3():
    result = kmeans(KMEANS_POINTS, 3, seed=0)
    assert result.inertia == pytest.approx(BRUTE_FORCE_OPTIMUM_K3, abs=1e-9)
    assert result.inertia == pytest.approx(brute_force_inertia(KMEANS_POINTS, 3), abs=1e-9)


def test_kmeans_matches_brute_force_k2():
    result = kmeans(KMEANS_POINTS, 2, seed=0)
    assert result.inertia == pytest.approx(BRUTE_FORCE_OPTIMUM_K2, abs=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_kmeans_brute_force_random_instances(seed):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(9, 2))
    result = kmeans(points, 3, seed=seed)
    assert result.inertia == pytest.approx(brute_force_inertia(points, 3), abs=1e-9)


def test_kmeans_two_blobs_recovers_means(rng):
    a = rng.normal(loc=0.0, scale=0.5, size=(20, 3))
    b = rng.normal(loc=10.0, scale=0.5, size=(20, 3))
    vocab = fit_vocabulary(np.vstack([a, b]), n_words=2, seed=0)
    words = vocab.words[np.argsort(vocab.words[:, 0])]
    assert np.allclose(words[0], a.mean(axis=0), atol=1e-6)
    assert np.allclose(words[1], b.mean(axis=0), atol=1e-6)


def test_kmeans_each_point_its_own_word(rng):
    points = rng.normal(size=(5, 2))
    result = kmeans(points, 5, seed=3)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(np.sort(result.centroids, axis=0), np.sort(points, axis=0))


@pytest.mark.parametrize("seed", [0, 1, 2, 5, 9])
def test_kmeans_inertia_never_increases(seed):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(60, 4))
    result = kmeans(points, 6, seed=seed, n_init=1)
    history = result.inertia_history
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_kmeans_deterministic():
    rng = np.random.default_rng(7)
    points = rng.normal(size=(40, 3))
    r1 = kmeans(points, 4, seed=123)
    r2 = kmeans(points, 4, seed=123)
    assert np.array_equal(r1.centroids, r2.centroids)
    assert np.array_equal(r1.labels, r2.labels)


def test_kmeans_too_few_points():
    with pytest.raises(DataError):
        kmeans(np.zeros((2, 2)), 3, seed=0)


def test_kmeans_empty_cluster_repair_is_deterministic():
    # 3 tight duplicate groups, k=3: k-means++ may seed two centroids in one
    # group; repair must still converge identically for a fixed seed
    points = np.array([[0.0, 0.0]] * 4 + [[5.0, 5.0]] * 4 + [[9.0, 0.0]] * 4)
    r1 = kmeans(points, 3, seed=5)
    r2 = kmeans(points, 3, seed=5)
    assert np.array_equal(r1.centroids, r2.centroids)
    assert r1.inertia == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# encode


def identity_pca(d: int) -> PcaTransform:
    return PcaTransform(mean=np.zeros(d), components=np.eye(d), eigenvalues=np.ones(d))


def test_encode_identity_transforms():
    d = 4
    vocab = Vocabulary(words=np.eye(d))
    vectors = np.array([[1.0, 2.0, 3.0, 4.0], [3.0, 0.0, 1.0, 2.0]])
    emb = EmbeddingSet(vectors.astype(np.float32), "q")
    sig = encode(emb, identity_pca(d), vocab)
    expected = vectors.mean(axis=0)
    expected /= np.linalg.norm(expected)
    assert sig.r == pytest.approx(expected, abs=1e-12)


def test_encode_orthogonal_words_concentrate():
    v = np.array([2.0, 0.0, 0.0])
    words = np.array([v, [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    emb = EmbeddingSet(v[None, :].astype(np.float32), "q")
    sig = encode(emb, identity_pca(3), Vocabulary(words=words))
    assert sig.r == pytest.approx([1.0, 0.0, 0.0], abs=1e-12)


def dense_encode_oracle(vectors, mean, components, words):
    """Straight-line reimplementation with explicit loops."""
    n_words = words.shape[0]
    sims = np.zeros((len(vectors), n_words))
    for i, a in enumerate(vectors):
        reduced = components @ (a - mean)
        for j in range(n_words):
            sims[i, j] = float(np.dot(reduced, words[j]))
    pooled = sims.mean(axis=0)
    return pooled / np.linalg.norm(pooled)


def test_encode_matches_dense_oracle(rng):
    d_latent, d_pca, n_words = 6, 4, 5
    samples = rng.normal(size=(50, d_latent))
    pca = fit_pca(samples, d_pca)
    words = rng.normal(size=(n_words, d_pca))
    vocab = Vocabulary(words=words)
    vectors = rng.normal(size=(3, d_latent))
    emb = EmbeddingSet(vectors.astype(np.float32), "q")
    sig = encode(emb, pca, vocab)
    expected = dense_encode_oracle(emb.vectors.astype(np.float64), pca.mean, pca.components, words)
    assert sig.r == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 7.5])
def test_encode_scale_invariant_with_zero_mean(alpha, rng):
    d = 5
    vocab = Vocabulary(words=rng.normal(size=(4, d)))
    vectors = rng.normal(size=(3, d))
    base = encode(EmbeddingSet(vectors.astype(np.float32), "a"), identity_pca(d), vocab)
    scaled = encode(EmbeddingSet((alpha * vectors).astype(np.float32), "b"), identity_pca(d), vocab)
    assert scaled.r == pytest.approx(base.r, abs=1e-6)


def test_encode_zero_vector_warns():
    d = 3
    vocab = Vocabulary(words=np.eye(d))
    emb = EmbeddingSet(np.zeros((2, d), dtype=np.float32), "zero")
    with pytest.warns(RuntimeWarning):
        sig = encode(emb, identity_pca(d), vocab)
    assert np.all(sig.r == 0.0)


def test_encode_hard_mode_histogram():
    d = 2
    words = np.array([[0.0, 0.0], [10.0, 10.0]])
    vectors = np.array([[0.1, 0.0], [0.0, 0.1], [9.9, 10.0]])
    emb = EmbeddingSet(vectors.astype(np.float32), "q")
    sig = encode(emb, identity_pca(d), Vocabulary(words=words), mode="hard")
    expected = np.array([2.0, 1.0]) / np.linalg.norm([2.0, 1.0])
    assert sig.r == pytest.approx(expected, abs=1e-12)


def test_encode_dimension_mismatch():
    emb = EmbeddingSet(np.ones((1, 3), dtype=np.float32), "q")
    with pytest.raises(DataError):
        encode(emb, identity_pca(4), Vocabulary(words=np.eye(4)))


def test_encoder_stack_section_round_trip(rng):
    samples = rng.normal(size=(60, 8))
    pca = fit_pca(samples, 5)
    vocab = fit_vocabulary(pca.transform(samples), 4, seed=2)
    stack = EncoderStack(pca=pca, vocab=vocab, mode="soft")
    loaded = EncoderStack.from_sections(stack.to_sections())
    emb = EmbeddingSet(rng.normal(size=(3, 8)).astype(np.float32), "q")
    assert loaded.encode(emb).r == pytest.approx(stack.encode(emb).r, abs=1e-15)


def test_signature_norm_validation():
    with pytest.raises(NumericalError):
        ImageSignature(r=np.array([0.5, 0.5]), source_id="bad")
