"""Synthetic datasets with known densities, (de)quantization and CSV I/O.

Every generated distribution is a Gaussian mixture with full covariances, so
its log-density is exact and its entropy can be computed analytically (one
component) or by Monte Carlo with the true density (several components).

The ``inversion_pair`` geometry
-------------------------------
In-distribution data are four elongated "arms" that leave the origin along
directions close to ``-e_0`` plus a small, tight "hub" component sitting at
the origin.  The out-of-distribution set is an even tighter Gaussian at the
origin.  The hub gives the origin a very high density, so the OOD set is
more likely than typical ID points although its entropy is far lower.  Away
from the hub the density collapses, because the arms start at a distance, so
any perturbation that pushes OOD points off the hub exposes them.

The arms point to negative coordinates on purpose: top-quantile rectification
of the embeddings then only trims small transverse activations and keeps the
direction that identifies the arms.

``non_inversion_pair`` reuses the same ID set and draws OOD points from arms
that are wider across, which gives the OOD set higher entropy.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, FormatError, ParameterError
from .io import atomic_write_text
from .rng import Stream

KINDS = ("gaussian", "gaussian_mixture", "inversion_pair", "non_inversion_pair")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covs: np.ndarray  # (k, d, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError("mixture weights must be non-negative and sum to 1")
        if self.means.shape[0] != len(w) or self.covs.shape != (len(w),) + (self.means.shape[1],) * 2:
            raise ParameterError("mixture means/covariances do not match the weights")
        try:
            chol = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("mixture covariances must be positive definite") from exc
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, stream: Stream) -> np.ndarray:
        if n == 0:
            return np.zeros((0, self.dim))
        comp = stream.choice(self.weights, n)
        eps = stream.normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], eps)

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((len(x), len(self.weights)))
        for k, (w, mu, L) in enumerate(zip(self.weights, self.means, self._chol)):
            r = np.linalg.solve(L, (x - mu).T)
            half_logdet = np.log(np.diag(L)).sum()
            out[:, k] = math.log(w) if w > 0 else -np.inf
            out[:, k] += -0.5 * (self.dim * LOG_2PI + (r * r).sum(axis=0)) - half_logdet
        return logsumexp(out, axis=1)

    def entropy(self, n_mc: int = 200_000, seed: int = 0) -> tuple[float, float]:
        """Differential entropy in nats and its standard error (0 for one component)."""
        if len(self.weights) == 1:
            _, logdet = np.linalg.slogdet(self.covs[0])
            return 0.5 * (self.dim * (LOG_2PI + 1.0) + logdet), 0.0
        neg = -self.log_density(self.sample(n_mc, Stream(seed, "entropy-mc")))
        return float(neg.mean()), float(neg.std(ddof=1) / math.sqrt(n_mc))


@dataclass(frozen=True)
class PairGeometry:
    n_arms: int = 4
    radius: float = 0.75
    radial_sigma: float = 0.15
    transverse_sigma: float = 0.075
    spread: float = 0.05
    hub_weight: float = 0.05
    hub_sigma: float = 0.005
    ood_sigma: float = 0.001
    ood_transverse_scale: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.hub_weight < 1.0:
            raise ParameterError("hub weight must lie in [0, 1)", hub_weight=self.hub_weight)
        if self.n_arms < 1:
            raise ParameterError("need at least one arm", n_arms=self.n_arms)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    kind: str = "inversion_pair"
    dim: int = 16
    n_train: int = 8000
    n_test: int = 4000
    seed: int = 0
    means: tuple = ()
    variances: tuple = ()
    weights: tuple = ()
    geometry: PairGeometry = field(default_factory=PairGeometry)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError("unknown dataset kind", kind=self.kind)
        if self.dim < 1:
            raise ParameterError("dimension must be positive", dim=self.dim)
        if self.n_train < 0 or self.n_test < 0:
            raise ParameterError("sample counts must be non-negative")
        if self.kind in ("inversion_pair", "non_inversion_pair") and self.dim < 3:
            raise ParameterError("pair geometries need at least 3 dimensions", dim=self.dim)


class Dataset(NamedTuple):
    train: np.ndarray
    test: np.ndarray
    ood: np.ndarray


def _arm_directions(dim: int, g: PairGeometry) -> np.ndarray:
    dirs = np.zeros((g.n_arms, dim))
    dirs[:, 0] = -1.0
    angles = 2.0 * np.pi * np.arange(g.n_arms) / g.n_arms
    dirs[:, 1] += g.spread * np.cos(angles)
    dirs[:, 2] += g.spread * np.sin(angles)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _arm_cov(v: np.ndarray, radial: float, transverse: float) -> np.ndarray:
    outer = np.outer(v, v)
    return radial ** 2 * outer + transverse ** 2 * (np.eye(len(v)) - outer)


def distributions(spec: SyntheticDatasetSpec) -> tuple[GaussianMixture, GaussianMixture | None]:
    """The ID mixture and, for pair kinds, the OOD mixture of ``spec``."""
    d = spec.dim
    if spec.kind in ("gaussian", "gaussian_mixture"):
        means = np.asarray(spec.means, dtype=np.float64).reshape(-1, d) if spec.means else np.zeros((1, d))
        k = len(means)
        if spec.kind == "gaussian" and k != 1:
            raise ParameterError("gaussian kind takes exactly one mean")
        var = np.asarray(spec.variances, dtype=np.float64) if spec.variances else np.ones(1)
        var = np.broadcast_to(var.reshape(k, -1) if var.size > 1 else var, (k, d))
        if np.any(var <= 0):
            raise ParameterError("variances must be positive")
        w = np.asarray(spec.weights, dtype=np.float64) if spec.weights else np.full(k, 1.0 / k)
        covs = np.stack([np.diag(v) for v in var])
        return GaussianMixture(w, means, covs), None

    g = spec.geometry
    dirs = _arm_directions(d, g)
    arm_w = (1.0 - g.hub_weight) / g.n_arms
    id_w = [g.hub_weight] + [arm_w] * g.n_arms
    id_means = [np.zeros(d)] + [g.radius * v for v in dirs]
    id_covs = [g.hub_sigma ** 2 * np.eye(d)] + [_arm_cov(v, g.radial_sigma, g.transverse_sigma) for v in dirs]
    arm_means = id_means[1:]
    if g.hub_weight == 0.0:
        id_w, id_means, id_covs = id_w[1:], id_means[1:], id_covs[1:]
    id_mix = GaussianMixture(np.array(id_w), np.array(id_means), np.array(id_covs))
    if spec.kind == "inversion_pair":
        ood_mix = GaussianMixture(np.ones(1), np.zeros((1, d)), g.ood_sigma ** 2 * np.eye(d)[None])
    else:
        wide = g.transverse_sigma * g.ood_transverse_scale
        ood_mix = GaussianMixture(np.full(g.n_arms, 1.0 / g.n_arms), np.array(arm_means),
                                  np.array([_arm_cov(v, g.radial_sigma, wide) for v in dirs]))
    return id_mix, ood_mix


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """Draw train/test ID batches and (for pair kinds) an OOD test batch of size ``n_test``."""
    id_mix, ood_mix = distributions(spec)
    train = id_mix.sample(spec.n_train, Stream(spec.seed, "data", "train"))
    test = id_mix.sample(spec.n_test, Stream(spec.seed, "data", "test"))
    if ood_mix is None:
        ood = np.zeros((0, spec.dim))
    else:
        ood = ood_mix.sample(spec.n_test, Stream(spec.seed, "data", "ood"))
    return Dataset(train, test, ood)


def dequantize(x, seed: int, bin_width: float = 1.0 / 256.0) -> np.ndarray:
    """Add independent ``U(0, bin_width)`` noise to every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    u = Stream(seed, "dequantize").uniform(x.shape) * bin_width
    # the open-interval uniform never reaches bin_width, but guard the product anyway
    return x + np.minimum(u, np.nextafter(bin_width, 0.0))


def quantize(x, low: float = 0.0, high: float = 1.0) -> bytes:
    """Map ``[low, high]`` to bytes 0..255 (clamped, round half to even)."""
    x = np.asarray(x, dtype=np.float64)
    if not high > low:
        raise ParameterError("quantization range is empty", low=low, high=high)
    unit = np.clip((x - low) / (high - low), 0.0, 1.0)
    return np.rint(unit * 255.0).astype(np.uint8).tobytes()


def _header(dim: int, with_split: bool) -> list[str]:
    return [f"col_{j}" for j in range(dim)] + (["split"] if with_split else [])


def save_csv(path, batch, split=None) -> None:
    """Write a batch with ``col_0..col_{d-1}`` and an optional per-row ``split`` label."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_header(batch.shape[1], split is not None))
    for i, row in enumerate(batch):
        cells = [repr(float(v)) for v in row]
        if split is not None:
            cells.append(split[i] if not isinstance(split, str) else split)
        writer.writerow(cells)
    atomic_write_text(path, buf.getvalue())


def load_csv(path) -> tuple[np.ndarray, list[str] | None]:
    """Read a batch written by :func:`save_csv`.  Returns ``(batch, splits or None)``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError("cannot read CSV file", path=str(path), reason=exc.strerror) from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("CSV file has no header", path=str(path)) from None
    with_split = bool(header) and header[-1] == "split"
    cols = header[:-1] if with_split else header
    if cols != [f"col_{j}" for j in range(len(cols))] or not cols:
        raise FormatError("unexpected CSV header", path=str(path), line=1)
    rows, splits = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise FormatError("wrong number of fields", path=str(path), line=lineno)
        try:
            rows.append([float(v) for v in rec[:len(cols)]])
        except ValueError:
            raise FormatError("non-numeric value", path=str(path), line=lineno) from None
        if with_split:
            splits.append(rec[-1])
    batch = np.array(rows, dtype=np.float64).reshape(-1, len(cols))
    if not np.all(np.isfinite(batch)):
        raise DomainError("CSV contains non-finite values", path=str(path))
    return batch, (splits if with_split else None)
