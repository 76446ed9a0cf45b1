import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from spem import data
from spem.entropy import knn_entropy
from spem.errors import DomainError, FormatError, ParameterError


def test_single_gaussian_entropy_is_analytic():
    spec = data.SyntheticDatasetSpec(kind="gaussian", dim=3, variances=(0.5, 2.0, 1.0))
    mix, ood = data.distributions(spec)
    assert ood is None
    expected = 0.5 * sum(math.log(2 * math.pi * math.e * v) for v in (0.5, 2.0, 1.0))
    assert mix.entropy()[0] == pytest.approx(expected, abs=1e-12)


def test_mixture_entropy_monte_carlo_agrees_for_separated_components():
    # far-apart equal-weight components: H = H(component) + log 2
    spec = data.SyntheticDatasetSpec(kind="gaussian_mixture", dim=2, means=((-50.0, 0.0), (50.0, 0.0)))
    mix, _ = data.distributions(spec)
    value, se = mix.entropy(n_mc=50_000)
    assert value == pytest.approx(math.log(2 * math.pi * math.e) + math.log(2), abs=4 * se + 1e-3)


def test_generate_shapes_and_determinism():
    spec = data.SyntheticDatasetSpec(n_train=100, n_test=50, seed=3)
    a, b = data.generate(spec), data.generate(spec)
    assert a.train.shape == (100, 16) and a.test.shape == (50, 16) and a.ood.shape == (50, 16)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a.train[:50], a.test)


def test_plain_gaussian_has_empty_ood():
    ds = data.generate(data.SyntheticDatasetSpec(kind="gaussian", dim=2, n_train=10, n_test=5))
    assert ds.ood.shape == (0, 2)


def test_gaussian_kind_samples_match_moments():
    spec = data.SyntheticDatasetSpec(kind="gaussian", dim=2, n_train=20_000, n_test=0,
                                     means=((1.0, -2.0),), variances=(4.0, 0.25))
    x = data.generate(spec).train
    np.testing.assert_allclose(x.mean(axis=0), [1.0, -2.0], atol=0.05)
    np.testing.assert_allclose(x.var(axis=0), [4.0, 0.25], rtol=0.05)
    assert stats.kstest((x[:, 0] - 1.0) / 2.0, "norm").pvalue > 0.01


def test_inversion_pair_entropy_gap():
    id_mix, ood_mix = data.distributions(data.SyntheticDatasetSpec())
    assert id_mix.entropy(n_mc=20_000)[0] - ood_mix.entropy()[0] >= 1.0


def test_non_inversion_pair_has_higher_ood_entropy():
    spec = data.SyntheticDatasetSpec(kind="non_inversion_pair")
    id_mix, ood_mix = data.distributions(spec)
    assert ood_mix.entropy(n_mc=20_000)[0] > id_mix.entropy(n_mc=20_000)[0]


def test_zero_hub_weight_drops_component():
    spec = data.SyntheticDatasetSpec(geometry=data.PairGeometry(hub_weight=0.0))
    id_mix, _ = data.distributions(spec)
    assert len(id_mix.weights) == 4


def test_spec_validation():
    with pytest.raises(ParameterError):
        data.SyntheticDatasetSpec(kind="images")
    with pytest.raises(ParameterError):
        data.SyntheticDatasetSpec(dim=2)
    with pytest.raises(ParameterError):
        data.PairGeometry(hub_weight=1.0)


def test_quantize_rounds_and_clips():
    assert data.quantize(np.array([0.0, 1.0, 0.5, -3.0, 7.0])) == bytes([0, 255, 128, 0, 255])
    assert data.quantize(np.array([2.0]), low=0.0, high=4.0) == bytes([128])


def test_dequantize_stays_in_bin():
    x = np.arange(256) / 256.0
    d = data.dequantize(x, seed=0)
    assert np.all(d >= x) and np.all(d < x + 1 / 256)
    assert np.array_equal(d, data.dequantize(x, seed=0))


def test_csv_round_trip(tmp_path):
    batch = np.array([[0.1, 1e-300], [-2.5, 3.0]])
    path = tmp_path / "d.csv"
    data.save_csv(path, batch, ["train", "ood"])
    back, splits = data.load_csv(path)
    assert np.array_equal(back, batch) and splits == ["train", "ood"]
    data.save_csv(path, batch)
    assert data.load_csv(path)[1] is None


def test_csv_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("col_0,col_1\n1.0,2.0\n1.0,abc\n")
    with pytest.raises(FormatError) as info:
        data.load_csv(path)
    assert info.value.context["line"] == 3
    path.write_text("col_0\nnan\n")
    with pytest.raises(DomainError):
        data.load_csv(path)
    with pytest.raises(FormatError):
        data.load_csv(tmp_path / "missing.csv")


def test_sample_count_validation():
    with pytest.raises(ParameterError):
        replace(data.SyntheticDatasetSpec(), n_train=-1)


@pytest.mark.parametrize("seed", range(10))
def test_inversion_gap_by_knn_estimate(seed):
    ds = data.generate(data.SyntheticDatasetSpec(n_train=0, n_test=3000, seed=seed))
    assert knn_entropy(ds.test).value - knn_entropy(ds.ood).value >= 1.0


def test_quantize_is_idempotent_after_round_trip():
    x = np.random.default_rng(0).uniform(size=1000)
    once = np.frombuffer(data.quantize(x), dtype=np.uint8) / 255.0
    assert data.quantize(once) == data.quantize(x)


def test_dequantize_mean_shift():
    shift = data.dequantize(np.zeros(200_000), seed=1)
    assert abs(shift.mean() - 1 / 512) < 1e-5


def test_header_only_csv_is_empty_batch(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("col_0,col_1,split\n")
    batch, splits = data.load_csv(path)
    assert batch.shape == (0, 2) and splits == []
