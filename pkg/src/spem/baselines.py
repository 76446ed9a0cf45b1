"""Comparison detectors built on the same flow.

All scores are oriented so that higher means more anomalous.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import flow
from .data import quantize
from .errors import DomainError, FitError, FormatError, ParameterError
from .io import atomic_write_text
from .rng import Stream
from .scoring import ScoreTable

logger = logging.getLogger(__name__)

CODEC_ID = "zlib-deflate-9"
LN2 = math.log(2.0)
GMM_FORMAT = "spem-gmm"
GMM_VERSION = 1


def likelihood_scores(model, x) -> ScoreTable:
    return ScoreTable("likelihood", -flow.log_likelihood(model, np.atleast_2d(x)))


def likelihood_score(model, x) -> float:
    return -flow.log_likelihood(model, x)


def compress_length(data: bytes) -> int:
    """Length in bits of the deflate (level 9) encoding of ``data``."""
    if len(data) == 0:
        raise DomainError("cannot compress an empty byte sequence")
    return 8 * len(zlib.compress(bytes(data), 9))


def compressed_bits(x, value_range=(0.0, 1.0)) -> np.ndarray:
    """Per-row compressed bit length after 8-bit quantization over ``value_range``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lo, hi = value_range
    return np.array([compress_length(quantize(row, lo, hi)) for row in x], dtype=np.float64)


def complexity_scores(model, x, bits) -> ScoreTable:
    """Negative log-likelihood in bits minus the compressed length in bits."""
    nll_bits = -flow.log_likelihood(model, np.atleast_2d(x)) / LN2
    return ScoreTable("complexity", nll_bits - np.asarray(bits, dtype=np.float64))


def complexity_score(model, x, x_quantized: bytes) -> float:
    return float(-flow.log_likelihood(model, x) / LN2 - compress_length(x_quantized))


def typicality_latent_scores(model, x, squared_radius: bool = False) -> ScoreTable:
    """Distance of the squared latent norm from ``sqrt(d)``.

    With ``squared_radius`` the reference is ``d`` instead, which is where the
    squared norm of a standard normal latent concentrates.
    """
    z, _ = flow.forward(model, np.atleast_2d(x))
    sq = np.sum(z * z, axis=1)
    ref = float(model.dim) if squared_radius else math.sqrt(model.dim)
    return ScoreTable("typicality_latent_sq" if squared_radius else "typicality_latent", np.abs(ref - sq))


def typicality_latent_score_from_latent(z, squared_radius: bool = False) -> float:
    z = np.asarray(z, dtype=np.float64)
    ref = float(len(z)) if squared_radius else math.sqrt(len(z))
    return abs(ref - float(z @ z))


@dataclass(frozen=True)
class TypicalityReference:
    """Mean training log-likelihood, cached once."""

    mean_loglik: float
    n: int

    @classmethod
    def fit(cls, model, id_train) -> "TypicalityReference":
        ll = flow.log_likelihood(model, np.atleast_2d(id_train))
        return cls(float(np.mean(ll)), len(ll))

    def scores(self, model, x) -> ScoreTable:
        ll = flow.log_likelihood(model, np.atleast_2d(x))
        return ScoreTable("typicality_entropy", np.abs(self.mean_loglik - ll))


def typicality_entropy_score(model, id_train, x) -> float:
    """Single-point form; refits the reference on every call, so prefer :class:`TypicalityReference`."""
    return float(TypicalityReference.fit(model, id_train).scores(model, np.asarray(x)[None, :]).scores[0])


@dataclass(frozen=True)
class BackgroundConfig:
    corruption_prob: float = 0.2
    value_range: tuple[float, float] | None = None
    train: flow.TrainConfig = field(default_factory=flow.TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ParameterError("corruption probability must lie in [0, 1]", value=self.corruption_prob)


def corrupt_background(x, corruption_prob: float, value_range, seed: int) -> np.ndarray:
    """Replace each coordinate with probability ``corruption_prob`` by a uniform draw over ``value_range``."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = value_range
    s = Stream(seed, "background")
    hit = s.uniform(x.shape) < corruption_prob
    repl = s.uniform(x.shape, lo, hi)
    return np.where(hit, repl, x)


def train_background_model(id_data, bg: BackgroundConfig = BackgroundConfig()):
    x = np.asarray(id_data, dtype=np.float64)
    value_range = bg.value_range or (float(x.min()), float(x.max()))
    corrupted = corrupt_background(x, bg.corruption_prob, value_range, bg.seed)
    model, _ = flow.train(corrupted, bg.train)
    return model


def likelihood_ratio_scores(model, bg_model, x) -> ScoreTable:
    x = np.atleast_2d(x)
    return ScoreTable("likelihood_ratio", -(flow.log_likelihood(model, x) - flow.log_likelihood(bg_model, x)))


def gmm_features(model, x, bits) -> np.ndarray:
    """Per-row statistics (latent log-density, compressed bits) used by the mixture detector."""
    z, _ = flow.forward(model, np.atleast_2d(x))
    return np.column_stack([flow.base_log_density(z), np.asarray(bits, dtype=np.float64)])


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    trace: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return len(self.weights)


def _component_logpdf(x, means, covs) -> np.ndarray:
    n, d = x.shape
    out = np.empty((n, len(means)))
    for j, (mu, cov) in enumerate(zip(means, covs)):
        chol = np.linalg.cholesky(cov)
        r = np.linalg.solve(chol, (x - mu).T)
        out[:, j] = -0.5 * (d * math.log(2 * math.pi) + np.sum(r * r, axis=0)) - np.log(np.diag(chol)).sum()
    return out


def _regularize(cov: np.ndarray, ridge: float) -> np.ndarray:
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        logger.warning("singular mixture covariance; adding ridge %g", ridge)
        return cov + ridge * np.eye(len(cov))


def _kmeanspp(x, k, stream: Stream) -> np.ndarray:
    centers = [x[stream.choice(np.ones(len(x)), 1)[0]]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        weights = d2 if d2.sum() > 0 else np.ones(len(x))
        centers.append(x[stream.choice(weights, 1)[0]])
    return np.array(centers)


def fit_gmm(points, k: int = 3, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
            ridge: float = 1e-6) -> GmmModel:
    """Full-covariance Gaussian mixture by EM with k-means++ seeding.

    ``trace`` holds the mean log-likelihood before every M-step; iteration
    stops once it improves by less than ``tol``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError("mixture fitting expects a 2-D batch", shape=x.shape)
    if len(x) < 10 * k:
        raise FitError("need at least 10 points per mixture component", n=len(x), k=k)
    n, d = x.shape
    means = _kmeanspp(x, k, Stream(seed, "gmm-init"))
    base_cov = _regularize(np.atleast_2d(np.cov(x, rowvar=False, bias=True)), ridge)
    covs = np.repeat(base_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    trace = []
    for _ in range(max_iter):
        joint = _component_logpdf(x, means, covs) + np.log(weights)
        norm = logsumexp(joint, axis=1)
        trace.append(float(norm.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        covs = np.stack([
            _regularize(((resp[:, j, None] * (x - means[j])).T @ (x - means[j])) / nk[j], ridge)
            for j in range(k)
        ])
    return GmmModel(weights, means, covs, tuple(trace))


def gmm_log_density(gmm: GmmModel, points) -> np.ndarray:
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return logsumexp(_component_logpdf(x, gmm.means, gmm.covs) + np.log(gmm.weights), axis=1)


def gmm_scores(gmm: GmmModel, points) -> ScoreTable:
    return ScoreTable("gmm", -gmm_log_density(gmm, points))


def save_gmm(gmm: GmmModel, path) -> None:
    d = gmm.means.shape[1]
    lines = [f"{GMM_FORMAT} {GMM_VERSION}", f"k {gmm.k}", f"dim {d}"]
    for w, mu, cov in zip(gmm.weights, gmm.means, gmm.covs):
        lines.append("weight " + repr(float(w)))
        lines.append("mean " + " ".join(repr(float(v)) for v in mu))
        lines.append("cov " + " ".join(repr(float(v)) for v in cov.ravel()))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_gmm(path) -> GmmModel:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError("cannot read mixture file", path=str(path), reason=exc.strerror) from exc
    try:
        tag, version = lines[0].split()
        if tag != GMM_FORMAT:
            raise FormatError("not a mixture file", path=str(path))
        if int(version) != GMM_VERSION:
            raise FormatError("unsupported mixture file version", path=str(path), version=version)
        k = int(lines[1].split()[1])
        d = int(lines[2].split()[1])
        w, mu, cov = [], [], []
        for j in range(k):
            block = lines[3 + 3 * j: 6 + 3 * j]
            w.append(float(block[0].split()[1]))
            mu.append([float(v) for v in block[1].split()[1:]])
            cov.append(np.array([float(v) for v in block[2].split()[1:]]).reshape(d, d))
    except (IndexError, ValueError) as exc:
        raise FormatError("malformed mixture file", path=str(path)) from exc
    return GmmModel(np.array(w), np.array(mu).reshape(k, d), np.array(cov))
