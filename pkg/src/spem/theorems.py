"""Numerical checks of the perturbation bounds on Gaussian instances.

Notation used throughout: ``p`` is the in-distribution law, ``q`` the
out-of-distribution law and ``model`` the density model, all diagonal
Gaussians.  ``noise_p`` and ``noise_q`` are the variances of the isotropic
perturbations applied to ``p`` and ``q`` respectively.

Analytic checks use an absolute tolerance of 1e-9; Monte-Carlo checks use
three standard errors of a paired estimator driven by common random numbers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .entropy import (
    GaussianSpec,
    entropy_power,
    expected_loglik,
    gaussian_entropy,
    kl_gaussians,
    w2_gaussians,
)
from .errors import ParameterError
from .rng import Stream

ANALYTIC_TOL = 1e-9
TWO_PI_E = 2.0 * math.pi * math.e
CHECK_COLUMNS = ("name", "instance", "method", "lhs", "rhs", "rhs_upper", "slack", "tolerance", "holds", "detail")


@dataclass
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    holds: bool
    method: str = "analytic"
    tolerance: float = ANALYTIC_TOL
    rhs_upper: float | None = None
    instance: str = ""
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        self.holds = bool(self.holds)
        self.lhs, self.rhs = float(self.lhs), float(self.rhs)

    @property
    def slack(self) -> float:
        return self.lhs - self.rhs


@dataclass(frozen=True)
class DeltaDecomposition:
    delta: float
    delta_entropy: float
    delta_kl: float


def _describe(**specs) -> str:
    parts = []
    for name, v in specs.items():
        if isinstance(v, GaussianSpec):
            parts.append(f"{name}=N(mean={np.round(v.mean, 4).tolist()},var={np.round(v.var, 4).tolist()})")
        else:
            parts.append(f"{name}={v:.6g}")
    return ";".join(parts)


def epi_entropy_bound(h: float, dim: int, noise_var: float) -> float:
    """Lower bound on ``H(X + N(0, noise_var I))`` from the entropy power inequality."""
    return 0.5 * dim * math.log(math.exp(2.0 * h / dim) + TWO_PI_E * noise_var)


def check_decomposition(p: GaussianSpec, q: GaussianSpec, model: GaussianSpec, n: int = 20000,
                        seed: int = 0) -> BoundCheck:
    """Monte-Carlo log-likelihood gap versus its KL-plus-entropy decomposition."""
    eps = Stream(seed, "decomposition").normal((n, p.dim))
    diff = model.log_density(p.mean + np.sqrt(p.var) * eps) - model.log_density(q.mean + np.sqrt(q.var) * eps)
    lhs = float(diff.mean())
    se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    rhs = (kl_gaussians(q, model) - kl_gaussians(p, model) + gaussian_entropy(q) - gaussian_entropy(p))
    tol = 3.0 * se + ANALYTIC_TOL
    return BoundCheck("decomposition", lhs, rhs, abs(lhs - rhs) <= tol, "monte_carlo", tol,
                      instance=_describe(p=p, q=q, model=model), detail={"std_error": se})


def check_theorem1(p: GaussianSpec, q: GaussianSpec, model: GaussianSpec, sigma: float,
                   n: int = 20000, seed: int = 0, method: str = "analytic") -> BoundCheck:
    """Lower bound on ``E_p[log model] - E_{q*N(0, sigma^2 I)}[log model]``."""
    d = p.dim
    q_pert = q.convolve(sigma ** 2)
    rhs = epi_entropy_bound(gaussian_entropy(q), d, sigma ** 2) - gaussian_entropy(p) - kl_gaussians(p, model)
    if method == "analytic":
        lhs = expected_loglik(p, model) - expected_loglik(q_pert, model)
        tol = ANALYTIC_TOL
    elif method == "monte_carlo":
        eps = Stream(seed, "theorem1").normal((n, d))
        diff = model.log_density(p.mean + np.sqrt(p.var) * eps) - model.log_density(q_pert.mean + np.sqrt(q_pert.var) * eps)
        lhs = float(diff.mean())
        tol = 3.0 * float(diff.std(ddof=1) / math.sqrt(n))
    else:
        raise ParameterError("unknown method", method=method)
    return BoundCheck("theorem1", lhs, rhs, lhs >= rhs - tol, method, tol,
                      instance=_describe(p=p, q=q, model=model, sigma=sigma))


def theorem2_rhs(p: GaussianSpec, q: GaussianSpec, model: GaussianSpec, noise_p: float, noise_q: float) -> float:
    d = p.dim
    numer = math.exp(2.0 * gaussian_entropy(q) / d) + TWO_PI_E * noise_q
    log_denom = math.log(TWO_PI_E) + np.mean(np.log(p.var + noise_p))
    return 0.5 * d * (math.log(numer) - log_denom) - kl_gaussians(p.convolve(noise_p), model)


def check_theorem2(p: GaussianSpec, q: GaussianSpec, model: GaussianSpec, sigma_p: float, sigma_q: float,
                   n: int = 20000, seed: int = 0, method: str = "analytic") -> BoundCheck:
    """Lower bound on the perturbed gap with fixed noise scales ``sigma_p`` and ``sigma_q``."""
    noise_p, noise_q = sigma_p ** 2, sigma_q ** 2
    p_pert, q_pert = p.convolve(noise_p), q.convolve(noise_q)
    rhs = theorem2_rhs(p, q, model, noise_p, noise_q)
    if method == "analytic":
        lhs = expected_loglik(p_pert, model) - expected_loglik(q_pert, model)
        tol = ANALYTIC_TOL
    elif method == "monte_carlo":
        eps = Stream(seed, "theorem2").normal((n, p.dim))
        diff = (model.log_density(p_pert.mean + np.sqrt(p_pert.var) * eps)
                - model.log_density(q_pert.mean + np.sqrt(q_pert.var) * eps))
        lhs = float(diff.mean())
        tol = 3.0 * float(diff.std(ddof=1) / math.sqrt(n))
    else:
        raise ParameterError("unknown method", method=method)
    return BoundCheck("theorem2", lhs, rhs, lhs >= rhs - tol, method, tol,
                      instance=_describe(p=p, q=q, model=model, sigma_p=sigma_p, sigma_q=sigma_q))


def delta_e_analytic(var_x, var_y, noise_p: float, noise_q: float, dim: int | None = None) -> float:
    """Entropy increment of scoring the noise alone instead of the perturbed data.

    ``var_x`` and ``var_y`` are per-dimension variances of the ID and OOD laws
    (scalars are broadcast to ``dim`` dimensions).
    """
    var_x, var_y = _broadcast_vars(var_x, var_y, dim)
    d = len(var_x)
    noise_gain = 0.5 * d * (math.log(noise_q) - math.log(noise_p))
    perturbed = 0.5 * np.sum(np.log(var_y + noise_q) - np.log(var_x + noise_p))
    return float(noise_gain - perturbed)


def _broadcast_vars(var_x, var_y, dim):
    var_x = np.atleast_1d(np.asarray(var_x, dtype=np.float64))
    var_y = np.atleast_1d(np.asarray(var_y, dtype=np.float64))
    d = dim or max(len(var_x), len(var_y))
    return np.broadcast_to(var_x, (d,)).astype(float), np.broadcast_to(var_y, (d,)).astype(float)


def theorem3_threshold(var_x, var_y, dim: int | None = None) -> float:
    var_x, var_y = _broadcast_vars(var_x, var_y, dim)
    d = len(var_x)
    h_x = gaussian_entropy(GaussianSpec(np.zeros(d), var_x))
    return TWO_PI_E * float(np.sum(var_y)) / (d * math.exp(2.0 * h_x / d))


def check_theorem3_condition(var_x, var_y, noise_p: float, noise_q: float, dim: int | None = None) -> BoundCheck:
    """When the noise-variance ratio beats the threshold, the entropy increment must be positive."""
    threshold = theorem3_threshold(var_x, var_y, dim)
    ratio = noise_q / noise_p
    de = delta_e_analytic(var_x, var_y, noise_p, noise_q, dim)
    asserted = ratio > threshold
    holds = (not asserted) or de > -ANALYTIC_TOL
    return BoundCheck("theorem3", de, 0.0, holds, instance=_describe(noise_p=noise_p, noise_q=noise_q),
                      detail={"ratio": ratio, "threshold": threshold, "asserted": asserted})


def delta_e_partials(var_x, var_y, noise_p: float, noise_q: float, dim: int | None = None) -> tuple[float, float]:
    """Closed-form derivatives of the entropy increment in ``noise_p`` and ``noise_q``."""
    var_x, var_y = _broadcast_vars(var_x, var_y, dim)
    d = len(var_x)
    d_p = float(np.sum(0.5 / (var_x + noise_p)) - 0.5 * d / noise_p)
    d_q = float(0.5 * d / noise_q - np.sum(0.5 / (var_y + noise_q)))
    return d_p, d_q


def delta_e_central_difference(var_x, var_y, noise_p: float, noise_q: float, h: float,
                               dim: int | None = None) -> tuple[float, float]:
    """Central differences of the entropy increment, each term evaluated with log1p to avoid cancellation."""
    var_x, var_y = _broadcast_vars(var_x, var_y, dim)
    d = len(var_x)

    def log_step(base):
        # log(base + h) - log(base - h)
        return np.log1p(2.0 * h / (np.asarray(base) - h))

    fd_p = (np.sum(0.5 * log_step(var_x + noise_p)) - 0.5 * d * log_step(noise_p)) / (2.0 * h)
    fd_q = (0.5 * d * log_step(noise_q) - np.sum(0.5 * log_step(var_y + noise_q))) / (2.0 * h)
    return float(fd_p), float(fd_q)


def check_theorem4_monotonicity(var_x, var_y, noise_p: float, noise_q: float, h: float = 1e-6,
                                rel_tol: float = 1e-6, dim: int | None = None) -> BoundCheck:
    """Entropy increment decreases in ``noise_p`` and increases in ``noise_q``."""
    if not 0 < h < min(noise_p, noise_q):
        raise ParameterError("step must be positive and smaller than both noise variances", h=h)
    a_p, a_q = delta_e_partials(var_x, var_y, noise_p, noise_q, dim)
    n_p, n_q = delta_e_central_difference(var_x, var_y, noise_p, noise_q, h, dim)
    err = max(abs(a_p - n_p) / max(abs(a_p), abs(n_p)), abs(a_q - n_q) / max(abs(a_q), abs(n_q)))
    signs = a_p < 0 and a_q > 0 and n_p < 0 and n_q > 0
    return BoundCheck("theorem4", min(-a_p, a_q), 0.0, signs and err <= rel_tol, "analytic", rel_tol,
                      instance=_describe(noise_p=noise_p, noise_q=noise_q),
                      detail={"d_noise_p": a_p, "d_noise_q": a_q, "fd_noise_p": n_p, "fd_noise_q": n_q,
                              "relative_error": err})


def delta_decomposition(p: GaussianSpec, q: GaussianSpec, model: GaussianSpec,
                        noise_p: float, noise_q: float) -> DeltaDecomposition:
    """Gap increment of scoring noise alone versus scoring perturbed data, and its two parts."""
    d = p.dim
    z_p = GaussianSpec.isotropic(d, noise_p)
    z_q = GaussianSpec.isotropic(d, noise_q)
    p_pert, q_pert = p.convolve(noise_p), q.convolve(noise_q)
    delta = ((expected_loglik(z_p, model) - expected_loglik(z_q, model))
             - (expected_loglik(p_pert, model) - expected_loglik(q_pert, model)))
    d_kl = (kl_gaussians(z_q, model) - kl_gaussians(z_p, model)
            - (kl_gaussians(q_pert, model) - kl_gaussians(p_pert, model)))
    d_e = (gaussian_entropy(z_q) - gaussian_entropy(z_p)
           - (gaussian_entropy(q_pert) - gaussian_entropy(p_pert)))
    return DeltaDecomposition(delta, d_e, d_kl)


def check_theorem5_semiconvex(p: GaussianSpec, q: GaussianSpec, model_sigma: float, noise_p: float,
                              noise_q: float, model_mean=None) -> BoundCheck:
    """Interval for the increment when the negative log-density is smooth and semiconvex.

    The model is ``N(model_mean, model_sigma^2 I)``, whose negative log-density
    has Hessian ``I / model_sigma^2``: smoothness ``1 / model_sigma^2`` and
    semiconvexity 0.
    """
    d = p.dim
    model = GaussianSpec.isotropic(d, model_sigma ** 2, model_mean)
    smooth, semiconvex = 1.0 / model_sigma ** 2, 0.0
    gap = expected_loglik(p, model) - expected_loglik(q, model)
    dec = delta_decomposition(p, q, model, noise_p, noise_q)
    half_width = 0.5 * d * (semiconvex + smooth) * (noise_p + noise_q)
    lo, hi = -gap - half_width, -gap + half_width
    scale = max(1.0, abs(dec.delta), abs(dec.delta_entropy), abs(dec.delta_kl))
    identity_ok = abs(dec.delta - (dec.delta_entropy + dec.delta_kl)) <= 1e-10 * scale
    tol = ANALYTIC_TOL * max(1.0, abs(gap))
    inside = lo - tol <= dec.delta <= hi + tol
    condition = -2.0 * gap / (d * (semiconvex + smooth)) > noise_p + noise_q
    positive_ok = (not condition) or dec.delta > 0
    return BoundCheck("theorem5", dec.delta, lo, inside and identity_ok and positive_ok, "analytic", tol,
                      rhs_upper=hi, instance=_describe(p=p, q=q, model_sigma=model_sigma,
                                                       noise_p=noise_p, noise_q=noise_q),
                      detail={"gap": gap, "delta_entropy": dec.delta_entropy, "delta_kl": dec.delta_kl,
                              "sufficient_condition": condition})


def check_lipschitz_delta_bound(p: GaussianSpec, q: GaussianSpec, model: GaussianSpec, sigma_p: float,
                                sigma_q: float, radius: float) -> BoundCheck:
    """Diagnostic: the Lipschitz bound with the gradient-norm maximum over a ball of ``radius``.

    A Gaussian log-density is not globally Lipschitz, so a failure here is
    reported rather than treated as a bug.
    """
    dec = delta_decomposition(p, q, model, sigma_p ** 2, sigma_q ** 2)
    # gradient of log N(m, diag v) is -(x - m) / v; its norm over |x| <= R is at most (R + |m|) / min v
    lip = (radius + float(np.linalg.norm(model.mean))) / float(np.min(model.var))
    bound = lip * (w2_gaussians(p, q) + 2.0 * math.sqrt(p.dim) * abs(sigma_q - sigma_p))
    return BoundCheck("lipschitz_diagnostic", bound, abs(dec.delta), abs(dec.delta) <= bound + ANALYTIC_TOL,
                      instance=_describe(p=p, q=q, model=model, sigma_p=sigma_p, sigma_q=sigma_q, radius=radius),
                      detail={"lipschitz": lip, "abs_delta": abs(dec.delta), "diagnostic": True})


DIMENSIONS = (1, 2, 4, 8)


def _log_uniform(stream: Stream, shape, lo=1e-2, hi=1e2):
    return np.exp(stream.uniform(shape, math.log(lo), math.log(hi)))


def _random_gaussian(stream: Stream, d: int, mean_scale: float = 1.0) -> GaussianSpec:
    return GaussianSpec(stream.normal(d) * mean_scale, _log_uniform(stream, d))


def random_instances(theorem: str, count: int = 100, seed: int = 0) -> list[BoundCheck]:
    """Run a check on ``count`` random instances (variances log-uniform on [1e-2, 1e2])."""
    out = []
    for i in range(count):
        s = Stream(seed, "instances", theorem, i)
        d = DIMENSIONS[i % len(DIMENSIONS)]
        if theorem == "decomposition":
            chk = check_decomposition(_random_gaussian(s, d), _random_gaussian(s, d), _random_gaussian(s, d),
                                      n=20000, seed=i)
        elif theorem == "theorem1":
            sigma = math.sqrt(float(_log_uniform(s, ())))
            chk = check_theorem1(_random_gaussian(s, d), _random_gaussian(s, d), _random_gaussian(s, d), sigma)
        elif theorem == "theorem2":
            sp, sq = np.sqrt(_log_uniform(s, 2))
            chk = check_theorem2(_random_gaussian(s, d), _random_gaussian(s, d), _random_gaussian(s, d), sp, sq)
        elif theorem == "theorem3":
            var_x, var_y = _log_uniform(s, d), _log_uniform(s, d)
            noise_p = float(_log_uniform(s, ()))
            # straddle the threshold so both branches are exercised
            ratio = theorem3_threshold(var_x, var_y) * math.exp(s.uniform((), -2.0, 2.0))
            chk = check_theorem3_condition(var_x, var_y, noise_p, noise_p * float(ratio))
        elif theorem == "theorem4":
            var_x, var_y = _log_uniform(s, d), _log_uniform(s, d)
            noise_p, noise_q = _log_uniform(s, 2)
            chk = check_theorem4_monotonicity(var_x, var_y, float(noise_p), float(noise_q))
        elif theorem == "theorem5":
            p, q = _random_gaussian(s, d), _random_gaussian(s, d)
            model_sigma = math.sqrt(float(_log_uniform(s, ())))
            noise_p, noise_q = _log_uniform(s, 2)
            chk = check_theorem5_semiconvex(p, q, model_sigma, float(noise_p), float(noise_q), s.normal(d))
        elif theorem == "lipschitz":
            p, q, model = _random_gaussian(s, d), _random_gaussian(s, d), _random_gaussian(s, d)
            sp, sq = np.sqrt(_log_uniform(s, 2))
            radius = max(np.linalg.norm(p.mean) + 4 * math.sqrt(p.var.sum() + sp ** 2 * d),
                         np.linalg.norm(q.mean) + 4 * math.sqrt(q.var.sum() + sq ** 2 * d))
            chk = check_lipschitz_delta_bound(p, q, model, float(sp), float(sq), float(radius))
        else:
            raise ParameterError("unknown theorem", theorem=theorem)
        chk.instance = f"{i}:d={d}:" + chk.instance
        out.append(chk)
    return out


SUITE = ("decomposition", "theorem1", "theorem2", "theorem3", "theorem4", "theorem5", "lipschitz")


def run_suite(count: int = 100, seed: int = 0, theorems=SUITE) -> list[BoundCheck]:
    checks = []
    for name in theorems:
        checks.extend(random_instances(name, count, seed))
    return checks


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return repr(float(v))


def checks_to_csv(checks) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CHECK_COLUMNS)
    for c in checks:
        idx, _, rest = c.instance.partition(":")
        detail = ";".join(f"{k}={_cell(v) if not isinstance(v, str) else v}" for k, v in sorted(c.detail.items()))
        writer.writerow([c.name, idx, c.method, _cell(c.lhs), _cell(c.rhs), _cell(c.rhs_upper),
                         _cell(c.slack), _cell(c.tolerance), _cell(c.holds), detail])
    return buf.getvalue()
