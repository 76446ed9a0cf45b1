import numpy as np
import pytest

from spem import data, embed as emb, evaluation as ev, flow
from spem.errors import DomainError, ParameterError


@pytest.mark.parametrize("id_s, ood_s, expected", [
    ([0, 1], [2, 3], 1.0),
    ([1], [1], 0.5),
    ([0, 2], [1, 3], 0.75),
    ([2, 3], [0, 1], 0.0),
])
def test_auroc_examples(id_s, ood_s, expected):
    assert ev.auroc(id_s, ood_s) == expected
    assert ev.auroc(ev.ScoreSet(id_s, ood_s)) == expected


def test_auroc_rank_form_equals_pair_counting_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n_i, n_o = rng.integers(1, 1001, size=2)
        levels = rng.integers(2, 50)
        a, b = rng.integers(0, levels, n_i), rng.integers(0, levels, n_o)
        assert ev.auroc(a, b) == ev.auroc_pairwise(a, b)


def test_auroc_invariances():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=200), rng.normal(0.5, 1, size=150)
    base = ev.auroc(a, b)
    assert ev.auroc(np.exp(a), np.exp(b)) == base
    assert ev.auroc(-a, -b) == pytest.approx(1 - base, abs=1e-15)


def test_auroc_rejects_empty_and_nan():
    with pytest.raises(DomainError):
        ev.auroc([], [1.0])
    with pytest.raises(DomainError):
        ev.auroc([np.nan], [1.0])


def test_roc_curve_area_equals_auroc():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.integers(0, 6, 40), rng.integers(0, 6, 30)
        assert abs(ev.curve_area(ev.roc_curve(a, b)) - ev.auroc(a, b)) < 1e-12


def test_roc_curve_shapes():
    perfect = ev.roc_curve([0, 1], [2, 3])
    assert (0.0, 1.0) in map(tuple, perfect)
    assert ev.roc_curve([1.0], [2.0]).shape == (3, 2)
    c = ev.roc_curve([0.0, 1.0, 2.0], [0.5, 1.5])
    assert tuple(c[0]) == (0.0, 0.0) and tuple(c[-1]) == (1.0, 1.0)


def test_roc_random_scores_near_half():
    rng = np.random.default_rng(3)
    assert abs(ev.curve_area(ev.roc_curve(rng.normal(size=5000), rng.normal(size=5000))) - 0.5) < 0.02


def test_plateau_and_monotone_helpers():
    assert ev.plateau_reached([0.1, 0.5, 0.8, 0.9, 0.905, 0.91, 0.91, 0.909])
    assert not ev.plateau_reached([0.1, 0.5, 0.8, 0.9])
    assert ev.plateau_reached([0.3])
    r = ev.SweepResult(np.arange(4), np.array([0.1, 0.3, 0.29, 0.5]), "x", 0)
    assert r.is_monotone()
    r.aurocs = np.array([0.1, 0.3, 0.25, 0.5])
    assert not r.is_monotone()


@pytest.fixture(scope="module")
def small_pipeline():
    spec = data.SyntheticDatasetSpec(n_train=1000, n_test=300)
    ds = data.generate(spec)
    model, _ = flow.train(ds.train, flow.TrainConfig(epochs=10))
    e = emb.fit_embedder(ds.train)
    bank = emb.build_memory_bank(ds.train, e)
    return ev.Pipeline(model, e, bank, ds.test, ds.ood), ds


def test_sigma_zero_equals_likelihood_baseline(small_pipeline):
    pipe, _ = small_pipeline
    sweep = ev.sigma_sweep(pipe.model, pipe.id_test, pipe.ood_test, [0.0, 0.1], seed=4)
    baseline = ev.auroc(-flow.log_likelihood(pipe.model, pipe.id_test), -flow.log_likelihood(pipe.model, pipe.ood_test))
    assert sweep.aurocs[0] == baseline
    with pytest.raises(ParameterError):
        ev.sigma_sweep(pipe.model, pipe.id_test, pipe.ood_test, [-0.1])


def test_alpha_sweep_zero_point_and_single_row(small_pipeline):
    pipe, _ = small_pipeline
    r = ev.alpha_sweep(pipe, [0.0], seed=0)
    baseline = ev.auroc(-flow.log_likelihood(pipe.model, pipe.id_test), -flow.log_likelihood(pipe.model, pipe.ood_test))
    assert list(r.rows()) == [(0.0, baseline, "spem", 0)]


def test_controlled_lambda_equal_distributions_near_half(small_pipeline):
    pipe, _ = small_pipeline
    res = ev.controlled_lambda_experiment(pipe.model, pipe.id_test, pipe.ood_test, alpha=0.1, n_repeats=2,
                                          ood_lambda=(0.65, 0.05))
    assert len(res.similarity_aurocs) == 2
    assert abs(res.similarity_mean - 0.5) < 0.06


def test_benchmark_shape_and_csv(small_pipeline):
    pipe, ds = small_pipeline
    spec = data.SyntheticDatasetSpec(n_train=1000, n_test=300)
    cfg = ev.BenchmarkConfig(pairs=(ev.PairConfig("inv", spec),),
                             detectors=("likelihood", "spem", "similarity", "typicality_entropy", "gmm"))
    fitted = {"inv": ev.fit_pair(ds.train, cfg, model=pipe.model)}
    rows = ev.benchmark_run(cfg, fitted)
    assert [(r.pair, r.detector) for r in rows] == [("inv", d) for d in cfg.detectors]
    text = ev.benchmark_csv(rows)
    assert text.splitlines()[0] == "pair,detector,auroc,seed,codec_id"
    assert all(line.endswith(",0,zlib-deflate-9") for line in text.splitlines()[1:])


def test_benchmark_rejects_unknown_detector():
    with pytest.raises(ParameterError):
        ev.BenchmarkConfig(detectors=("oracle",))


def test_sweep_csv_columns():
    r = ev.SweepResult(np.array([0.0, 0.5]), np.array([0.25, 1.0]), "spem", 3)
    assert ev.sweep_csv(r).splitlines() == ["grid,auroc,detector,seed", "0.0,0.25,spem,3", "0.5,1.0,spem,3"]
