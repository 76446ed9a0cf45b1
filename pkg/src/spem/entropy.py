"""Entropy, KL divergence, entropy power and Wasserstein distances.

Everything is in nats.  Analytic formulas cover Gaussians with diagonal
covariance; the k-nearest-neighbour estimator handles arbitrary samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .errors import DomainError, ParameterError
from .rng import Stream

logger = logging.getLogger(__name__)

LOG_2PIE = math.log(2.0 * math.pi * math.e)
DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianSpec:
    """Gaussian with diagonal covariance ``diag(var)``."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), mean.shape).copy()
        if not np.all(var > 0) or not np.all(np.isfinite(var)):
            raise ParameterError("variances must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def isotropic(cls, dim: int, variance: float, mean=None) -> "GaussianSpec":
        return cls(np.zeros(dim) if mean is None else mean, np.full(dim, float(variance)))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def convolve(self, noise_var: float) -> "GaussianSpec":
        """Distribution of ``X + N(0, noise_var I)``."""
        return GaussianSpec(self.mean, self.var + noise_var)

    def sample(self, n: int, stream: Stream) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * stream.normal((n, self.dim))

    def log_density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        r = (x - self.mean) ** 2 / self.var
        return -0.5 * (np.sum(np.log(2 * math.pi * self.var)) + np.sum(r, axis=-1))


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    method: str
    k: int | None = None
    n: int | None = None
    std_error: float = 0.0


def gaussian_entropy(spec: GaussianSpec) -> float:
    return float(0.5 * np.sum(LOG_2PIE + np.log(spec.var)))


def entropy_power(h: float, dim: int) -> float:
    return math.exp(2.0 * h / dim) / (2.0 * math.pi * math.e)


def knn_entropy(samples, k: int = 5) -> EntropyEstimate:
    """Kozachenko-Leonenko estimate from Euclidean k-th neighbour distances.

    The standard error is the plug-in ``d * std(log eps) / sqrt(n)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if not 1 <= k < n:
        raise ParameterError("need 1 <= k < n", k=k, n=n)
    dist, _ = cKDTree(x).query(x, k=k + 1)
    eps = dist[:, k]
    tiny = eps < DISTANCE_FLOOR
    if tiny.any():
        logger.warning("%d points have a zero k-th neighbour distance; flooring at %g", int(tiny.sum()), DISTANCE_FLOOR)
        eps = np.maximum(eps, DISTANCE_FLOOR)
    log_unit_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0)
    log_eps = np.log(eps)
    value = digamma(n) - digamma(k) + log_unit_ball + d * log_eps.mean()
    se = d * log_eps.std(ddof=1) / math.sqrt(n)
    return EntropyEstimate(float(value), "knn", k, n, float(se))


def kl_gaussians(p: GaussianSpec, q: GaussianSpec) -> float:
    """KL(p || q) for diagonal Gaussians."""
    if p.dim != q.dim:
        raise DomainError("dimension mismatch", p=p.dim, q=q.dim)
    ratio = p.var / q.var
    return float(0.5 * np.sum(ratio - 1.0 - np.log(ratio) + (p.mean - q.mean) ** 2 / q.var))


def expected_loglik(p: GaussianSpec, model: GaussianSpec) -> float:
    """``E_{x ~ p}[log model(x)]`` in closed form."""
    return float(-0.5 * np.sum(np.log(2 * math.pi * model.var) + (p.var + (p.mean - model.mean) ** 2) / model.var))


def _as_sampler(source):
    if isinstance(source, GaussianSpec):
        return source.sample
    from .flow import FlowModel, inverse

    if isinstance(source, FlowModel):
        return lambda n, stream: inverse(source, stream.normal((n, source.dim)))
    return source


def _as_scorer(target):
    if isinstance(target, GaussianSpec):
        return target.log_density
    from .flow import FlowModel, log_likelihood

    if isinstance(target, FlowModel):
        return lambda x: log_likelihood(target, x)
    return target


def mc_expected_loglik(sampler, scorer, n: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E[log density]`` and its standard error.

    ``sampler`` is a GaussianSpec, a FlowModel or ``f(n, stream) -> samples``;
    ``scorer`` is a GaussianSpec, a FlowModel or ``f(x) -> log densities``.
    """
    if n < 1:
        raise ParameterError("need at least one sample", n=n)
    x = _as_sampler(sampler)(n, Stream(seed, "mc-expectation"))
    vals = np.asarray(_as_scorer(scorer)(x), dtype=np.float64)
    if n == 1:
        return float(vals[0]), math.inf
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def w2_gaussians_isotropic(sigma1: float, sigma2: float, dim: int) -> float:
    """2-Wasserstein distance between ``N(0, sigma1^2 I)`` and ``N(0, sigma2^2 I)``."""
    return math.sqrt(dim) * abs(sigma1 - sigma2)


def w2_gaussians(p: GaussianSpec, q: GaussianSpec) -> float:
    """2-Wasserstein distance between diagonal Gaussians (commuting covariances)."""
    return float(math.sqrt(np.sum((p.mean - q.mean) ** 2) + np.sum((np.sqrt(p.var) - np.sqrt(q.var)) ** 2)))
