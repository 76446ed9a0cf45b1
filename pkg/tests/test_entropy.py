import math

import numpy as np
import pytest

from spem import flow
from spem.entropy import (
    GaussianSpec,
    entropy_power,
    expected_loglik,
    gaussian_entropy,
    kl_gaussians,
    knn_entropy,
    mc_expected_loglik,
    w2_gaussians,
    w2_gaussians_isotropic,
)
from spem.errors import DomainError, ParameterError
from spem.rng import Stream


def test_standard_normal_entropy():
    assert gaussian_entropy(GaussianSpec.isotropic(1, 1.0)) == pytest.approx(0.5 * math.log(2 * math.pi * math.e))


def test_entropy_power_of_gaussian_is_variance():
    h = gaussian_entropy(GaussianSpec.isotropic(3, 2.5))
    assert entropy_power(h, 3) == pytest.approx(2.5)


def test_epi_holds_with_equality_for_isotropic_gaussians():
    x, z = GaussianSpec.isotropic(2, 1.5), GaussianSpec.isotropic(2, 0.5)
    lhs = entropy_power(gaussian_entropy(x.convolve(0.5)), 2)
    assert lhs == pytest.approx(entropy_power(gaussian_entropy(x), 2) + entropy_power(gaussian_entropy(z), 2))


def test_knn_entropy_standard_normal():
    est = knn_entropy(Stream(0, "knn").normal((10_000, 1)), k=5)
    assert abs(est.value - 0.5 * math.log(2 * math.pi * math.e)) < 0.05
    assert 0 < est.std_error < 0.05


def test_knn_entropy_2d_gaussian():
    spec = GaussianSpec(np.zeros(2), np.array([0.5, 2.0]))
    est = knn_entropy(spec.sample(10_000, Stream(1, "knn")), k=5)
    assert abs(est.value - gaussian_entropy(spec)) < 0.08


def test_knn_duplicates_floor_with_warning(caplog):
    x = np.zeros((20, 1))
    est = knn_entropy(x, k=2)
    assert math.isfinite(est.value) and "zero" in caplog.text


def test_knn_validation():
    with pytest.raises(ParameterError):
        knn_entropy(np.zeros((3, 1)), k=3)


def test_kl_properties():
    p = GaussianSpec(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
    q = GaussianSpec(np.array([1.0, 0.0]), np.array([0.5, 1.0]))
    assert kl_gaussians(p, p) == 0.0
    assert kl_gaussians(p, q) > 0
    # 1-D closed form: log(s_q/s_p) + (s_p^2 + dm^2)/(2 s_q^2) - 1/2
    one = kl_gaussians(GaussianSpec([0.0], [1.0]), GaussianSpec([1.0], [4.0]))
    assert one == pytest.approx(math.log(2.0) + 2.0 / 8.0 - 0.5)
    with pytest.raises(DomainError):
        kl_gaussians(p, GaussianSpec.isotropic(3, 1.0))


def test_expected_loglik_decomposes():
    p = GaussianSpec(np.array([0.3, -1.0]), np.array([0.7, 1.3]))
    m = GaussianSpec(np.array([0.0, 0.5]), np.array([2.0, 0.4]))
    assert expected_loglik(p, m) == pytest.approx(-gaussian_entropy(p) - kl_gaussians(p, m), abs=1e-12)


def test_mc_expected_loglik_within_three_se():
    p = GaussianSpec(np.array([0.3, -1.0]), np.array([0.7, 1.3]))
    m = GaussianSpec(np.array([0.0, 0.5]), np.array([2.0, 0.4]))
    mean, se = mc_expected_loglik(p, m, 20_000, seed=0)
    assert abs(mean - expected_loglik(p, m)) < 3 * se


def test_mc_expected_loglik_flow_and_edge_cases():
    model = flow.init_model(2)
    mean, se = mc_expected_loglik(model, model, 20_000, seed=1)
    # identity flow: E[log N(z)] = -H(N(0, I_2))
    assert abs(mean + math.log(2 * math.pi * math.e)) < 3 * se
    assert mc_expected_loglik(model, model, 1, seed=1)[1] == math.inf
    with pytest.raises(ParameterError):
        mc_expected_loglik(model, model, 0, seed=1)


def test_w2():
    assert w2_gaussians_isotropic(1.0, 3.0, 4) == pytest.approx(4.0)
    p, q = GaussianSpec.isotropic(4, 1.0), GaussianSpec.isotropic(4, 9.0)
    assert w2_gaussians(p, q) == pytest.approx(4.0)
    assert w2_gaussians(p, GaussianSpec(np.full(4, 1.0), np.ones(4))) == pytest.approx(2.0)


def test_spec_validation():
    with pytest.raises(ParameterError):
        GaussianSpec(np.zeros(2), np.array([1.0, 0.0]))
