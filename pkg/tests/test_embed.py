import logging

import numpy as np
import pytest

from spem import embed as emb
from spem.errors import DomainError, FitError, FormatError, ParameterError


@pytest.fixture
def id_data():
    return np.random.default_rng(0).normal(size=(300, 6)) + [3.0, 0, 0, 0, 0, 0]


def test_identity_embedding():
    e = emb.fit_embedder(np.ones((4, 3)))
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(emb.embed(e, x), x)
    with pytest.raises(ParameterError):
        emb.fit_embedder(np.ones((4, 3)), "identity", out_dim=2)


def test_pca_recovers_principal_axis():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2000, 3)) * [5.0, 1.0, 0.2]
    e = emb.fit_embedder(x, "pca", out_dim=1)
    assert abs(abs(e.matrix[0, 0]) - 1.0) < 1e-3
    # the sign rule makes the dominant loading positive
    assert e.matrix[0, 0] > 0
    full = emb.fit_embedder(x, "pca", out_dim=3)
    np.testing.assert_allclose(emb.reconstruct(full, emb.embed(full, x)), x, atol=1e-10)


def test_random_projection_is_seeded(id_data):
    a = emb.fit_embedder(id_data, "random_projection", 4, seed=1)
    b = emb.fit_embedder(id_data, "random_projection", 4, seed=1)
    c = emb.fit_embedder(id_data, "random_projection", 4, seed=2)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    assert emb.embed(a, id_data).shape == (300, 4)


def test_embed_rejects_wrong_dim(id_data):
    e = emb.fit_embedder(id_data)
    with pytest.raises(DomainError):
        emb.embed(e, np.zeros(5))


def test_nearest_rank_quantile():
    v = np.arange(1, 101, dtype=float)
    assert emb.nearest_rank_quantile(v, 0.9) == 90.0
    assert emb.nearest_rank_quantile(v, 0.901) == 91.0
    assert emb.nearest_rank_quantile([5.0], 0.5) == 5.0


def test_calibrate_react_uses_pooled_activations():
    x = np.arange(20, dtype=float).reshape(10, 2)
    e = emb.fit_embedder(x)
    # 20 pooled values 0..19, nearest-rank 0.9 quantile is the 18th smallest
    assert emb.calibrate_react(e, x, 0.9) == 17.0


def test_calibrate_subsamples_deterministically(id_data):
    e = emb.fit_embedder(id_data)
    a = emb.calibrate_react(e, id_data, 0.9, sample_count=50, seed=3)
    assert a == emb.calibrate_react(e, id_data, 0.9, sample_count=50, seed=3)


def test_rectify():
    assert np.array_equal(emb.rectify([1.0, 5.0, -2.0], 2.0), [1.0, 2.0, -2.0])


def test_max_cosine_exact_and_zero_query():
    bank = emb.build_memory_bank(np.array([[1.0, 0.0], [0.0, 2.0]]), emb.fit_embedder(np.eye(2)),
                                 emb.ReActConfig(threshold=10.0))
    assert emb.max_cosine_similarity(bank, np.array([3.0, 0.0])) == pytest.approx(1.0)
    assert emb.max_cosine_similarity(bank, np.array([1.0, 1.0])) == pytest.approx(2 ** -0.5)
    assert emb.max_cosine_similarity(bank, np.zeros(2)) == 0.0
    assert emb.max_cosine_similarity(bank, np.array([-1.0, 0.0])) == pytest.approx(0.0)


def test_max_cosine_brute_force(id_data):
    e = emb.fit_embedder(id_data)
    bank = emb.build_memory_bank(id_data, e)
    q = np.random.default_rng(5).normal(size=(40, 6))
    got = emb.similarity(bank, e, q)
    r = emb.rectify(q, bank.beta)
    brute = [max(np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b) for b in bank.rows) for a in r]
    np.testing.assert_allclose(got, brute, atol=1e-12)
    assert np.all(np.abs(got) <= 1.0)


def test_bank_drops_zero_rows(caplog):
    e = emb.fit_embedder(np.eye(2))
    with caplog.at_level(logging.WARNING):
        bank = emb.build_memory_bank(np.array([[0.0, 0.0], [1.0, 1.0]]), e, emb.ReActConfig(threshold=5.0))
    assert bank.size == 1 and "zero-norm" in caplog.text
    with pytest.raises(FitError):
        emb.build_memory_bank(np.zeros((3, 2)), e, emb.ReActConfig(threshold=5.0))


def test_react_config_validation():
    with pytest.raises(ParameterError):
        emb.ReActConfig(quantile=1.0)


def test_bank_round_trip_and_fingerprint(tmp_path, id_data):
    e = emb.fit_embedder(id_data)
    bank = emb.build_memory_bank(id_data, e)
    path = tmp_path / "b.bin"
    emb.save_bank(bank, path)
    loaded = emb.load_bank(path, e)
    assert np.array_equal(loaded.rows, bank.rows) and loaded.beta == bank.beta
    other = emb.fit_embedder(id_data, "random_projection", 6, seed=9)
    with pytest.raises(FormatError):
        emb.load_bank(path, other)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        emb.load_bank(path)
