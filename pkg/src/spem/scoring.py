"""Similarity-scaled perturbation scoring.

A test point with similarity ``lam`` to the memory bank is perturbed with
isotropic Gaussian noise of standard deviation ``(1 - lam) * alpha`` and
scored by the flow's negative log-likelihood of the perturbed point.  All
scores follow the convention *higher = more anomalous*.

Each sample draws its noise from its own counter-based stream, keyed by
``sample_seed(seed, index)``, so scores do not depend on batch order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import embed as emb
from . import flow
from .errors import ParameterError
from .io import atomic_write_text
from .rng import Stream, derive_seed

SCORE_COLUMNS = ("sample_id", "detector", "score", "lambda", "sigma")


@dataclass(frozen=True)
class SpemConfig:
    alpha: float = 0.4
    alpha_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha >= 0 and self.alpha_noise >= 0):
            raise ParameterError("perturbation strengths must be non-negative",
                                 alpha=self.alpha, alpha_noise=self.alpha_noise)


@dataclass(frozen=True)
class AnomalyScore:
    value: float
    detector: str
    lam: float = float("nan")
    sigma: float = float("nan")


@dataclass
class ScoreTable:
    """Scores of one detector over a batch, with optional per-sample lambda and sigma."""

    detector: str
    scores: np.ndarray
    lambdas: np.ndarray | None = None
    sigmas: np.ndarray | None = None

    def __len__(self):
        return len(self.scores)


def clamp_similarity(lam):
    return np.clip(lam, 0.0, 1.0)


def perturbation_sigma(lam, alpha: float):
    if alpha < 0:
        raise ParameterError("alpha must be non-negative", alpha=alpha)
    return (1.0 - clamp_similarity(lam)) * alpha


def sample_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "sample", int(index))


def unit_noise(seed: int, index: int, dim: int) -> np.ndarray:
    """Standard normal draw reserved for sample ``index`` under global ``seed``."""
    return Stream(sample_seed(seed, index), "perturbation").normal(dim)


def unit_noise_batch(seed: int, n: int, dim: int, start: int = 0) -> np.ndarray:
    if n == 0:
        return np.zeros((0, dim))
    return np.stack([unit_noise(seed, start + i, dim) for i in range(n)])


def _perturb(x: np.ndarray, sigma: np.ndarray, noise: np.ndarray) -> np.ndarray:
    out = x.copy()
    moved = sigma > 0
    out[moved] = x[moved] + sigma[moved, None] * noise[moved]
    return out


def perturbed_nll(model, x, sigma, seed: int, start: int = 0) -> np.ndarray:
    """Negative log-likelihood of ``x + sigma * noise`` with per-sample noise.

    Rows with ``sigma == 0`` are scored unperturbed, bit for bit.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(x),))
    noise = unit_noise_batch(seed, len(x), x.shape[1], start)
    return -flow.log_likelihood(model, _perturb(x, sigma, noise))


def spem_scores(model, bank, embedder, cfg: SpemConfig, x, start: int = 0) -> ScoreTable:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lam = clamp_similarity(emb.similarity(bank, embedder, x))
    sigma = perturbation_sigma(lam, cfg.alpha)
    return ScoreTable("spem", perturbed_nll(model, x, sigma, cfg.seed, start), lam, sigma)


def spem_noise_scores(model, bank, embedder, cfg: SpemConfig, x, start: int = 0) -> ScoreTable:
    """Score only the similarity-scaled noise; the input content is discarded."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lam = clamp_similarity(emb.similarity(bank, embedder, x))
    sigma = perturbation_sigma(lam, cfg.alpha_noise)
    zeros = np.zeros_like(x)
    return ScoreTable("spem_noise", perturbed_nll(model, zeros, sigma, cfg.seed, start), lam, sigma)


def similarity_scores(bank, embedder, x) -> ScoreTable:
    lam = emb.similarity(bank, embedder, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return ScoreTable("similarity", -lam, lam, None)


def controlled_lambda_scores(model, cfg: SpemConfig, x, lam_external, start: int = 0) -> ScoreTable:
    """Same as :func:`spem_scores` with externally supplied similarities (clipped to [0, 1])."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lam = clamp_similarity(np.broadcast_to(np.asarray(lam_external, dtype=np.float64), (len(x),)))
    sigma = perturbation_sigma(lam, cfg.alpha)
    return ScoreTable("spem_controlled", perturbed_nll(model, x, sigma, cfg.seed, start), lam, sigma)


def _single(table: ScoreTable) -> AnomalyScore:
    lam = float(table.lambdas[0]) if table.lambdas is not None else float("nan")
    sigma = float(table.sigmas[0]) if table.sigmas is not None else float("nan")
    return AnomalyScore(float(table.scores[0]), table.detector, lam, sigma)


def spem_score(model, bank, embedder, cfg: SpemConfig, x, index: int = 0) -> AnomalyScore:
    """Score a single point; ``index`` selects its noise stream under ``cfg.seed``."""
    return _single(spem_scores(model, bank, embedder, cfg, np.asarray(x)[None, :], start=index))


def spem_noise_score(model, bank, embedder, cfg: SpemConfig, x, index: int = 0) -> AnomalyScore:
    return _single(spem_noise_scores(model, bank, embedder, cfg, np.asarray(x)[None, :], start=index))


def similarity_score(bank, embedder, x) -> AnomalyScore:
    return _single(similarity_scores(bank, embedder, np.asarray(x)[None, :]))


def controlled_lambda_spem_score(model, cfg: SpemConfig, x, lam_external: float, index: int = 0) -> AnomalyScore:
    return _single(controlled_lambda_scores(model, cfg, np.asarray(x)[None, :], lam_external, start=index))


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def scores_to_csv(rows) -> str:
    """Render ``(sample_id, detector, score, lambda, sigma)`` rows as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for sample_id, detector, score, lam, sigma in rows:
        writer.writerow([sample_id, detector, _fmt(score), _fmt(lam), _fmt(sigma)])
    return buf.getvalue()


def table_rows(table: ScoreTable, ids):
    for i, sid in enumerate(ids):
        lam = table.lambdas[i] if table.lambdas is not None else None
        sigma = table.sigmas[i] if table.sigmas is not None else None
        yield sid, table.detector, table.scores[i], lam, sigma


def write_scores_csv(path, rows) -> None:
    atomic_write_text(path, scores_to_csv(rows))
