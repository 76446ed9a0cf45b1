"""Affine-coupling normalizing flow with hand-written backpropagation.

The flow maps data ``x`` to a latent ``z`` through a stack of coupling layers.
Each layer keeps the coordinates where ``mask`` is True fixed and applies an
elementwise affine map to the others::

    h     = tanh(x_keep @ w1 + b1)
    raw_s, shift = split(h @ w2 + b2)
    log_scale = clamp * tanh(raw_s / clamp)
    y_move = x_move * exp(log_scale) + shift

The log-density is ``log N(z; 0, I) + sum(log_scale)``.  Gradients of the
negative log-likelihood are derived by hand for this fixed architecture and
validated by :func:`gradient_check`.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ParameterError, TrainingError
from .rng import Stream

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
PARAM_NAMES = ("w1", "b1", "w2", "b2")
MODEL_MAGIC = b"SPEMFLOW"
MODEL_VERSION = 1


@dataclass(frozen=True)
class CouplingLayer:
    mask: np.ndarray  # bool, True = passed through unchanged
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    log_scale_clamp: float = 5.0

    @property
    def keep(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def move(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **params) -> "CouplingLayer":
        merged = {**self.params(), **params}
        return CouplingLayer(self.mask, log_scale_clamp=self.log_scale_clamp, **merged)


@dataclass(frozen=True)
class FlowModel:
    layers: tuple[CouplingLayer, ...]
    dim: int

    @property
    def n_params(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params().values())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    n_layers: int = 4
    hidden: int = 32
    lr_floor: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "hidden"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be strictly positive", value=getattr(self, name))
        if not self.weight_decay >= 0:
            raise ParameterError("weight_decay must be non-negative", value=self.weight_decay)
        if not 2 <= self.n_layers <= 4:
            raise ParameterError("n_layers must be between 2 and 4", value=self.n_layers)
        if self.seed < 0:
            raise ParameterError("seed must be non-negative", value=self.seed)


@dataclass
class LossTrace:
    epoch_nll: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.epoch_nll[0]

    @property
    def final(self) -> float:
        return self.epoch_nll[-1]


def alternating_masks(dim: int, n_layers: int) -> list[np.ndarray]:
    idx = np.arange(dim)
    return [(idx % 2) == (k % 2) for k in range(n_layers)]


def init_model(dim: int, n_layers: int = 4, hidden: int = 32, seed: int = 0,
               clamp: float = 5.0, zero_output: bool = True) -> FlowModel:
    """Fresh model.  With ``zero_output`` the output layer is zero, so the flow is the identity."""
    if dim < 1:
        raise ParameterError("data dimension must be positive", dim=dim)
    rng = Stream(seed, "flow-init")
    layers = []
    for k, mask in enumerate(alternating_masks(dim, n_layers)):
        n_keep = int(mask.sum())
        n_move = dim - n_keep
        scale = 1.0 / math.sqrt(max(n_keep, 1))
        w1 = rng.normal((n_keep, hidden), scale=scale)
        b1 = np.zeros(hidden)
        if zero_output:
            w2 = np.zeros((hidden, 2 * n_move))
            b2 = np.zeros(2 * n_move)
        else:
            w2 = rng.normal((hidden, 2 * n_move), scale=0.3 / math.sqrt(hidden))
            b2 = rng.normal(2 * n_move, scale=0.1)
        layers.append(CouplingLayer(mask.copy(), w1, b1, w2, b2, clamp))
    return FlowModel(tuple(layers), dim)


def _check_batch(model: FlowModel, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != model.dim:
        raise DomainError("input has wrong shape", expected_dim=model.dim, shape=arr.shape)
    if not np.all(np.isfinite(arr)):
        raise DomainError("input contains non-finite values")
    return arr, single


def _conditioner(layer: CouplingLayer, x_keep: np.ndarray):
    h = np.tanh(x_keep @ layer.w1 + layer.b1)
    out = h @ layer.w2 + layer.b2
    n_move = out.shape[1] // 2
    raw = out[:, :n_move]
    shift = out[:, n_move:]
    c = layer.log_scale_clamp
    squashed = np.tanh(raw / c)
    return h, squashed, c * squashed, shift


def _forward_batch(model: FlowModel, x: np.ndarray, keep_cache: bool = False):
    z = x.copy()
    log_det = np.zeros(len(x))
    cache = []
    for layer in model.layers:
        keep, move = layer.keep, layer.move
        x_keep, x_move = z[:, keep], z[:, move]
        h, squashed, log_scale, shift = _conditioner(layer, x_keep)
        scale = np.exp(log_scale)
        z[:, move] = x_move * scale + shift
        log_det += log_scale.sum(axis=1)
        if keep_cache:
            cache.append((x_keep, x_move, h, squashed, scale))
    return z, log_det, cache


def forward(model: FlowModel, x):
    """Map data to latent space.  Returns ``(z, log_det)``; accepts one point or a batch."""
    arr, single = _check_batch(model, x)
    z, log_det, _ = _forward_batch(model, arr)
    if single:
        return z[0], float(log_det[0])
    return z, log_det


def inverse(model: FlowModel, z):
    arr, single = _check_batch(model, z)
    x = arr.copy()
    for layer in reversed(model.layers):
        keep, move = layer.keep, layer.move
        _, _, log_scale, shift = _conditioner(layer, x[:, keep])
        x[:, move] = (x[:, move] - shift) * np.exp(-log_scale)
    return x[0] if single else x


def base_log_density(z: np.ndarray) -> np.ndarray:
    return -0.5 * (z.shape[-1] * LOG_2PI + np.sum(z * z, axis=-1))


def log_likelihood(model: FlowModel, x):
    """Exact log-density in nats, per point."""
    arr, single = _check_batch(model, x)
    z, log_det, _ = _forward_batch(model, arr)
    ll = base_log_density(z) + log_det
    return float(ll[0]) if single else ll


def sample(model: FlowModel, n: int, seed: int) -> np.ndarray:
    if n < 0:
        raise ParameterError("sample count must be non-negative", n=n)
    if n == 0:
        return np.zeros((0, model.dim))
    z = Stream(seed, "flow-sample").normal((n, model.dim))
    return inverse(model, z)


def nll_and_grads(model: FlowModel, x: np.ndarray):
    """Mean negative log-likelihood over ``x`` and its gradient for every layer parameter."""
    n = len(x)
    z, log_det, cache = _forward_batch(model, x, keep_cache=True)
    nll = float(-np.mean(base_log_density(z) + log_det))
    grads = [None] * len(model.layers)
    dy = z / n
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        keep, move = layer.keep, layer.move
        x_keep, x_move, h, squashed, scale = cache[i]
        dy_move = dy[:, move]
        d_log_scale = dy_move * x_move * scale - 1.0 / n
        d_raw = d_log_scale * (1.0 - squashed * squashed)
        d_out = np.concatenate([d_raw, dy_move], axis=1)
        d_pre = (d_out @ layer.w2.T) * (1.0 - h * h)
        grads[i] = {
            "w1": x_keep.T @ d_pre,
            "b1": d_pre.sum(axis=0),
            "w2": h.T @ d_out,
            "b2": d_out.sum(axis=0),
        }
        dx = np.empty_like(dy)
        dx[:, move] = dy_move * scale
        dx[:, keep] = dy[:, keep] + d_pre @ layer.w1.T
        dy = dx
    return nll, grads


def _mean_nll(model: FlowModel, x: np.ndarray) -> float:
    z, log_det, _ = _forward_batch(model, x)
    return float(-np.mean(base_log_density(z) + log_det))


def gradient_check(model: FlowModel, x, eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference NLL gradients.

    The relative error uses ``max(|analytic|, |numeric|, 1e-3)`` as denominator so
    that parameters with vanishing gradient are compared absolutely.
    """
    if not eps > 0:
        raise ParameterError("finite-difference step must be positive", eps=eps)
    arr, _ = _check_batch(model, x)
    _, grads = nll_and_grads(model, arr)
    worst = 0.0
    layers = list(model.layers)
    for i, layer in enumerate(layers):
        for name in PARAM_NAMES:
            base = getattr(layer, name)
            for j in range(base.size):
                shifted = []
                for sign in (1.0, -1.0):
                    p = base.copy()
                    p.flat[j] += sign * eps
                    trial = layers.copy()
                    trial[i] = layer.replace(**{name: p})
                    shifted.append(_mean_nll(FlowModel(tuple(trial), model.dim), arr))
                numeric = (shifted[0] - shifted[1]) / (2.0 * eps)
                analytic = grads[i][name].flat[j]
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
                worst = max(worst, err)
    return worst


class _Adam:
    def __init__(self, cfg: TrainConfig, shapes):
        self.cfg = cfg
        self.m = [{k: np.zeros(s) for k, s in layer.items()} for layer in shapes]
        self.v = [{k: np.zeros(s) for k, s in layer.items()} for layer in shapes]
        self.t = 0

    def step(self, params, grads, lr):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k in p:
                gk = g[k] + cfg.weight_decay * p[k]
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk
                p[k] = p[k] - lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + cfg.adam_eps)


def train(data, cfg: TrainConfig = TrainConfig(), init: FlowModel | None = None):
    """Maximum-likelihood training with Adam and cosine learning-rate decay.

    The returned trace starts with the NLL of the initial model on the full
    data, followed by the full-data NLL after every epoch.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError("training data must be a 2-D batch", shape=x.shape)
    if len(x) < 2 * cfg.batch_size:
        raise ParameterError("need at least two batches of training data",
                             n=len(x), batch_size=cfg.batch_size)
    if not np.all(np.isfinite(x)):
        raise DomainError("training data contains non-finite values")
    model = init if init is not None else init_model(x.shape[1], cfg.n_layers, cfg.hidden, cfg.seed)
    params = [dict((k, v.copy()) for k, v in layer.params().items()) for layer in model.layers]
    opt = _Adam(cfg, [{k: v.shape for k, v in p.items()} for p in params])
    steps_per_epoch = len(x) // cfg.batch_size
    total = cfg.epochs * steps_per_epoch
    shuffler = Stream(cfg.seed, "flow-shuffle")

    def rebuild():
        return FlowModel(tuple(l.replace(**p) for l, p in zip(model.layers, params)), model.dim)

    trace = LossTrace([_mean_nll(model, x)])
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffler.permutation(len(x))
        for b in range(steps_per_epoch):
            batch = x[order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            nll, grads = nll_and_grads(rebuild(), batch)
            if not math.isfinite(nll):
                raise TrainingError("loss became non-finite", epoch=epoch)
            lr = cfg.lr_floor + 0.5 * (cfg.learning_rate - cfg.lr_floor) * (1.0 + math.cos(math.pi * step / total))
            opt.step(params, grads, lr)
            step += 1
        epoch_nll = _mean_nll(rebuild(), x)
        if not math.isfinite(epoch_nll):
            raise TrainingError("loss became non-finite", epoch=epoch)
        trace.epoch_nll.append(epoch_nll)
        logger.debug("epoch %d nll %.5f", epoch, epoch_nll)
    return rebuild(), trace


def save_model(model: FlowModel, path) -> None:
    from .io import atomic_write_bytes

    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<III", MODEL_VERSION, model.dim, len(model.layers))
    for layer in model.layers:
        out += layer.mask.astype(np.uint8).tobytes()
        out += struct.pack("<dI", layer.log_scale_clamp, layer.w1.shape[1])
        for name in PARAM_NAMES:
            out += np.ascontiguousarray(getattr(layer, name), dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(out))


def load_model(path) -> FlowModel:
    from .io import ByteReader

    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError("cannot read model file", path=str(path), reason=exc.strerror) from exc
    r = ByteReader(blob, str(path))
    r.expect_magic(MODEL_MAGIC)
    version, dim, n_layers = r.unpack("<III")
    if version != MODEL_VERSION:
        raise FormatError("unsupported model file version", path=str(path), version=version)
    layers = []
    for _ in range(n_layers):
        mask = r.array(dim, np.uint8).astype(bool)
        clamp, hidden = r.unpack("<dI")
        n_keep = int(mask.sum())
        n_move = dim - n_keep
        w1 = r.array(n_keep * hidden, "<f8").reshape(n_keep, hidden)
        b1 = r.array(hidden, "<f8")
        w2 = r.array(hidden * 2 * n_move, "<f8").reshape(hidden, 2 * n_move)
        b2 = r.array(2 * n_move, "<f8")
        layers.append(CouplingLayer(mask, w1, b1, w2, b2, clamp))
    r.expect_end()
    return FlowModel(tuple(layers), dim)
