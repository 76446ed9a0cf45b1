"""AUROC and the experiment drivers (perturbation sweeps, controlled similarity, benchmark matrix)."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import baselines
from . import embed as emb
from . import flow
from .data import PairGeometry, SyntheticDatasetSpec, generate
from .errors import DomainError, ParameterError
from .io import atomic_write_text
from .rng import Stream, derive_seed
from .scoring import SpemConfig, controlled_lambda_scores, perturbed_nll, similarity_scores, spem_noise_scores, spem_scores

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("grid", "auroc", "detector", "seed")
BENCHMARK_COLUMNS = ("pair", "detector", "auroc", "seed", "codec_id")
PLATEAU_RANGE = 0.02
MONOTONE_TOL = 0.02
# the tight central component only serves the inversion pair; with it, the
# non-inversion pair would penalise hub points that sit far from every bank row
NO_HUB = PairGeometry(hub_weight=0.0)


@dataclass(frozen=True)
class ScoreSet:
    """Anomaly scores of ID and OOD samples; higher means more anomalous."""

    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.id_scores, dtype=np.float64).ravel()
        b = np.asarray(self.ood_scores, dtype=np.float64).ravel()
        if a.size == 0 or b.size == 0:
            raise DomainError("AUROC needs at least one score on each side", n_id=a.size, n_ood=b.size)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DomainError("scores must be finite")
        object.__setattr__(self, "id_scores", a)
        object.__setattr__(self, "ood_scores", b)


def _as_scoreset(s, ood=None) -> ScoreSet:
    return s if isinstance(s, ScoreSet) else ScoreSet(s, ood)


def auroc(s, ood_scores=None) -> float:
    """Mann-Whitney statistic: P(ood > id) + P(ood == id) / 2.

    Accepts a :class:`ScoreSet` or the two score arrays.
    """
    s = _as_scoreset(s, ood_scores)
    n_i, n_o = len(s.id_scores), len(s.ood_scores)
    ranks = rankdata(np.concatenate([s.id_scores, s.ood_scores]))
    u = ranks[n_i:].sum() - n_o * (n_o + 1) / 2.0
    return float(u / (n_i * n_o))


def auroc_pairwise(s, ood_scores=None) -> float:
    """Quadratic pair-counting reference for :func:`auroc`."""
    s = _as_scoreset(s, ood_scores)
    o, i = s.ood_scores[:, None], s.id_scores[None, :]
    wins = np.count_nonzero(o > i) + 0.5 * np.count_nonzero(o == i)
    return float(wins / (len(s.id_scores) * len(s.ood_scores)))


def roc_curve(s, ood_scores=None) -> np.ndarray:
    """ROC points ``(fpr, tpr)`` from ``(0, 0)`` to ``(1, 1)``, one step per distinct threshold.

    Tied ID/OOD scores share a threshold, so the diagonal step gives the
    half-credit that :func:`auroc` assigns to ties.
    """
    s = _as_scoreset(s, ood_scores)
    thresholds = np.unique(np.concatenate([s.id_scores, s.ood_scores]))[::-1]
    id_sorted, ood_sorted = np.sort(s.id_scores), np.sort(s.ood_scores)
    fp = len(id_sorted) - np.searchsorted(id_sorted, thresholds, side="left")
    tp = len(ood_sorted) - np.searchsorted(ood_sorted, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / len(id_sorted)])
    tpr = np.concatenate([[0.0], tp / len(ood_sorted)])
    return np.column_stack([fpr, tpr])


def curve_area(curve) -> float:
    c = np.asarray(curve)
    return float(np.sum(np.diff(c[:, 0]) * (c[1:, 1] + c[:-1, 1]) / 2.0))


@dataclass
class SweepResult:
    grid: np.ndarray
    aurocs: np.ndarray
    detector: str
    seed: int
    plateau: bool | None = None

    def rows(self):
        for g, a in zip(self.grid, self.aurocs):
            yield float(g), float(a), self.detector, self.seed

    def is_monotone(self, tol: float = MONOTONE_TOL) -> bool:
        """Non-decreasing up to drops of at most ``tol`` below the running maximum."""
        a = np.asarray(self.aurocs)
        return bool(np.all(a >= np.maximum.accumulate(a) - tol))


def sigma_sweep(model, id_test, ood_test, sigma_grid, seed: int = 0) -> SweepResult:
    """Likelihood AUROC with only the OOD batch perturbed by ``N(0, sigma^2 I)``.

    The same unit noise is reused at every grid point, so the curve varies only
    through the scale.  ``sigma = 0`` scores the clean OOD batch.
    """
    grid = np.asarray(sigma_grid, dtype=np.float64).ravel()
    if np.any(grid < 0):
        raise ParameterError("perturbation scales must be non-negative")
    id_scores = -flow.log_likelihood(model, np.atleast_2d(id_test))
    ood = np.atleast_2d(ood_test)
    vals = [auroc(id_scores, perturbed_nll(model, ood, s, seed)) for s in grid]
    return SweepResult(grid, np.array(vals), "likelihood_ood_perturbed", seed)


@dataclass
class Pipeline:
    """A trained flow with its embedder and memory bank, plus the ID and OOD test batches."""

    model: flow.FlowModel
    embedder: emb.Embedder
    bank: emb.MemoryBank
    id_test: np.ndarray
    ood_test: np.ndarray


def plateau_reached(values, width: float = PLATEAU_RANGE) -> bool:
    v = np.asarray(values, dtype=np.float64)
    # at least two points, otherwise a short grid would plateau trivially
    tail = v[len(v) - min(len(v), max(2, math.ceil(len(v) / 4))):]
    return bool(np.ptp(tail) < width)


def alpha_sweep(pipe: Pipeline, alpha_grid, seed: int = 0) -> SweepResult:
    """SPEM AUROC for each perturbation strength; ``plateau`` checks the last quarter of the grid."""
    grid = np.asarray(alpha_grid, dtype=np.float64).ravel()
    n_id = len(pipe.id_test)
    vals = []
    for a in grid:
        cfg = SpemConfig(alpha=float(a), seed=seed)
        si = spem_scores(pipe.model, pipe.bank, pipe.embedder, cfg, pipe.id_test)
        so = spem_scores(pipe.model, pipe.bank, pipe.embedder, cfg, pipe.ood_test, start=n_id)
        vals.append(auroc(si.scores, so.scores))
    vals = np.array(vals)
    return SweepResult(grid, vals, "spem", seed, plateau_reached(vals))


@dataclass(frozen=True)
class ControlledLambdaResult:
    similarity_aurocs: tuple[float, ...]
    spem_aurocs: tuple[float, ...]

    @property
    def similarity_mean(self) -> float:
        return float(np.mean(self.similarity_aurocs))

    @property
    def spem_mean(self) -> float:
        return float(np.mean(self.spem_aurocs))


def controlled_lambda_experiment(model, id_test, ood_test, alpha: float = 0.1, n_repeats: int = 3, seed: int = 0,
                                 id_lambda=(0.65, 0.05), ood_lambda=(0.60, 0.05)) -> ControlledLambdaResult:
    """Replace the memory-bank similarity by draws from two fixed normals, clipped to [0, 1].

    Each repeat redraws the similarities and the perturbation noise.
    """
    id_test, ood_test = np.atleast_2d(id_test), np.atleast_2d(ood_test)
    n_id, n_ood = len(id_test), len(ood_test)
    lam_only, spem = [], []
    for r in range(n_repeats):
        rs = derive_seed(seed, "repeat", r)
        s = Stream(rs, "controlled-lambda")
        lam_id = np.clip(s.normal(n_id, *id_lambda), 0.0, 1.0)
        lam_ood = np.clip(s.normal(n_ood, *ood_lambda), 0.0, 1.0)
        lam_only.append(auroc(-lam_id, -lam_ood))
        cfg = SpemConfig(alpha=alpha, seed=rs)
        si = controlled_lambda_scores(model, cfg, id_test, lam_id)
        so = controlled_lambda_scores(model, cfg, ood_test, lam_ood, start=n_id)
        spem.append(auroc(si.scores, so.scores))
    return ControlledLambdaResult(tuple(lam_only), tuple(spem))


DETECTORS = ("likelihood", "spem", "spem_noise", "similarity", "complexity", "typicality_latent",
             "typicality_entropy", "likelihood_ratio", "gmm")


@dataclass(frozen=True)
class PairConfig:
    name: str
    data: SyntheticDatasetSpec


@dataclass(frozen=True)
class BenchmarkConfig:
    pairs: tuple[PairConfig, ...] = (
        PairConfig("inversion", SyntheticDatasetSpec(kind="inversion_pair")),
        PairConfig("non_inversion", SyntheticDatasetSpec(kind="non_inversion_pair", geometry=NO_HUB)),
    )
    detectors: tuple[str, ...] = DETECTORS
    train: flow.TrainConfig = field(default_factory=flow.TrainConfig)
    spem: SpemConfig = field(default_factory=SpemConfig)
    react: emb.ReActConfig = field(default_factory=emb.ReActConfig)
    embedder_kind: str = "identity"
    embed_dim: int | None = None
    background: baselines.BackgroundConfig = field(default_factory=baselines.BackgroundConfig)
    gmm_components: int = 3
    seed: int = 0

    def __post_init__(self):
        unknown = [d for d in self.detectors if d not in DETECTORS]
        if unknown:
            raise ParameterError("unknown detector", detectors=",".join(unknown))


@dataclass
class FittedPair:
    """Everything the detectors need for one ID/OOD pair."""

    model: flow.FlowModel
    embedder: emb.Embedder
    bank: emb.MemoryBank
    train: np.ndarray
    value_range: tuple[float, float]
    cache: dict = field(default_factory=dict)


def fit_pair(train, cfg: BenchmarkConfig, model: flow.FlowModel | None = None) -> FittedPair:
    train = np.asarray(train, dtype=np.float64)
    if model is None:
        model, _ = flow.train(train, cfg.train)
    e = emb.fit_embedder(train, cfg.embedder_kind, cfg.embed_dim, seed=cfg.seed)
    bank = emb.build_memory_bank(train, e, cfg.react)
    return FittedPair(model, e, bank, train, (float(train.min()), float(train.max())))


def _bits(fp: FittedPair, x) -> np.ndarray:
    return baselines.compressed_bits(x, fp.value_range)


def detector_scores(name: str, fp: FittedPair, cfg: BenchmarkConfig, x, start: int = 0) -> np.ndarray:
    """Scores of detector ``name`` on batch ``x``; ``start`` offsets the per-sample noise streams."""
    if name == "likelihood":
        return baselines.likelihood_scores(fp.model, x).scores
    if name == "spem":
        return spem_scores(fp.model, fp.bank, fp.embedder, cfg.spem, x, start).scores
    if name == "spem_noise":
        return spem_noise_scores(fp.model, fp.bank, fp.embedder, cfg.spem, x, start).scores
    if name == "similarity":
        return similarity_scores(fp.bank, fp.embedder, x).scores
    if name == "complexity":
        return baselines.complexity_scores(fp.model, x, _bits(fp, x)).scores
    if name == "typicality_latent":
        return baselines.typicality_latent_scores(fp.model, x).scores
    if name == "typicality_entropy":
        if "typicality" not in fp.cache:
            fp.cache["typicality"] = baselines.TypicalityReference.fit(fp.model, fp.train)
        return fp.cache["typicality"].scores(fp.model, x).scores
    if name == "likelihood_ratio":
        if "background" not in fp.cache:
            fp.cache["background"] = baselines.train_background_model(fp.train, cfg.background)
        return baselines.likelihood_ratio_scores(fp.model, fp.cache["background"], x).scores
    if name == "gmm":
        if "gmm" not in fp.cache:
            feats = baselines.gmm_features(fp.model, fp.train, _bits(fp, fp.train))
            fp.cache["gmm"] = baselines.fit_gmm(feats, cfg.gmm_components, seed=cfg.seed)
        return baselines.gmm_scores(fp.cache["gmm"], baselines.gmm_features(fp.model, x, _bits(fp, x))).scores
    raise ParameterError("unknown detector", detector=name)


@dataclass(frozen=True)
class BenchmarkRow:
    pair: str
    detector: str
    auroc: float
    seed: int
    codec_id: str = baselines.CODEC_ID


def benchmark_run(cfg: BenchmarkConfig, fitted: dict | None = None) -> list[BenchmarkRow]:
    """AUROC of every configured detector on every configured pair, in configuration order.

    ``fitted`` may map pair names to pre-built :class:`FittedPair` objects.
    """
    rows = []
    for pair in cfg.pairs:
        ds = generate(pair.data)
        if len(ds.ood) == 0:
            raise ParameterError("benchmark pairs need an OOD batch", pair=pair.name, kind=pair.data.kind)
        fp = (fitted or {}).get(pair.name) or fit_pair(ds.train, cfg)
        for det in cfg.detectors:
            si = detector_scores(det, fp, cfg, ds.test)
            so = detector_scores(det, fp, cfg, ds.ood, start=len(ds.test))
            rows.append(BenchmarkRow(pair.name, det, auroc(si, so), cfg.seed))
            logger.info("pair=%s detector=%s auroc=%.4f", pair.name, det, rows[-1].auroc)
    return rows


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def sweep_csv(results) -> str:
    if isinstance(results, SweepResult):
        results = [results]
    return _csv(SWEEP_COLUMNS, [(repr(g), repr(a), d, s) for r in results for g, a, d, s in r.rows()])


def benchmark_csv(rows) -> str:
    return _csv(BENCHMARK_COLUMNS, [(r.pair, r.detector, repr(float(r.auroc)), r.seed, r.codec_id) for r in rows])


def write_sweep_csv(path, results) -> None:
    atomic_write_text(path, sweep_csv(results))


def write_benchmark_csv(path, rows) -> None:
    atomic_write_text(path, benchmark_csv(rows))
