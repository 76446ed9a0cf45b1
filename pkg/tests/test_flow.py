import math

import numpy as np
import pytest

from spem import flow
from spem.errors import DomainError, FormatError, ParameterError, TrainingError


def numerical_log_det(model, x, h=1e-6):
    d = len(x)
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, j] = (flow.forward(model, x + e)[0] - flow.forward(model, x - e)[0]) / (2 * h)
    return np.linalg.slogdet(jac)[1]


def test_identity_model_standard_normal():
    model = flow.init_model(2)
    # log N(0; 0, I_2) = -log(2 pi)
    assert flow.log_likelihood(model, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    z, log_det = flow.forward(model, np.array([0.3, -1.0]))
    assert np.array_equal(z, [0.3, -1.0]) and log_det == 0.0


def test_masks_alternate_and_cover():
    masks = flow.alternating_masks(5, 4)
    assert all(m.any() and (~m).any() for m in masks)
    assert np.array_equal(masks[0], ~masks[1])


def test_round_trip(small_model, gaussian_batch):
    z, _ = flow.forward(small_model, gaussian_batch)
    back = flow.inverse(small_model, z)
    assert np.max(np.abs(back - gaussian_batch)) < 1e-8


def test_log_det_matches_jacobian(small_model, gaussian_batch):
    for x in gaussian_batch[:5]:
        _, log_det = flow.forward(small_model, x)
        assert abs(log_det - numerical_log_det(small_model, x)) < 1e-4


def test_batch_matches_single(small_model, gaussian_batch):
    batch = flow.log_likelihood(small_model, gaussian_batch[:3])
    single = [flow.log_likelihood(small_model, x) for x in gaussian_batch[:3]]
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-12)


def test_gradient_check(small_model, gaussian_batch):
    assert flow.gradient_check(small_model, gaussian_batch[:8]) < 1e-4


def test_gradient_check_rejects_bad_step(small_model, gaussian_batch):
    with pytest.raises(ParameterError):
        flow.gradient_check(small_model, gaussian_batch, eps=0.0)


def test_rejects_wrong_dimension_and_nan(small_model):
    with pytest.raises(DomainError):
        flow.log_likelihood(small_model, np.zeros(3))
    with pytest.raises(DomainError):
        flow.log_likelihood(small_model, np.array([0.0, np.nan, 0.0, 0.0]))


def test_layer_count_validated():
    with pytest.raises(ParameterError):
        flow.TrainConfig(n_layers=5)


def test_training_reduces_nll_and_is_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(512, 3)) * [2.0, 0.5, 1.0] + [1.0, 0.0, -1.0]
    cfg = flow.TrainConfig(epochs=15, batch_size=64, seed=4, hidden=16)
    m1, t1 = flow.train(x, cfg)
    m2, t2 = flow.train(x, cfg)
    assert t1.final < t1.initial - 0.3
    assert t1.epoch_nll == t2.epoch_nll
    assert np.array_equal(flow.log_likelihood(m1, x), flow.log_likelihood(m2, x))
    # the analytic entropy of this Gaussian is the floor for the expected NLL
    entropy = 0.5 * np.sum(np.log(2 * np.pi * np.e * np.array([4.0, 0.25, 1.0])))
    assert t1.final > entropy - 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_diverges_loudly():
    x = np.random.default_rng(0).normal(size=(256, 2))
    cfg = flow.TrainConfig(epochs=3, learning_rate=1e6, weight_decay=0.0)
    with pytest.raises(TrainingError):
        flow.train(x * 1e200, cfg)


def test_sample_is_seeded(small_model):
    assert np.array_equal(flow.sample(small_model, 5, seed=2), flow.sample(small_model, 5, seed=2))
    assert flow.sample(small_model, 5, seed=2).shape == (5, 4)


def test_save_load_round_trip(tmp_path, small_model, gaussian_batch):
    path = tmp_path / "m.bin"
    flow.save_model(small_model, path)
    loaded = flow.load_model(path)
    np.testing.assert_array_equal(flow.log_likelihood(loaded, gaussian_batch),
                                  flow.log_likelihood(small_model, gaussian_batch))


def test_load_rejects_truncated(tmp_path, small_model):
    path = tmp_path / "m.bin"
    flow.save_model(small_model, path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        flow.load_model(path)
