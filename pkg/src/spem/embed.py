"""Embedders, activation rectification and the in-distribution memory bank.

The similarity of a test point to the training set is the largest cosine
similarity between its rectified embedding and any stored (rectified)
training embedding.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FitError, FormatError, ParameterError
from .io import ByteReader, atomic_write_bytes
from .rng import Stream

logger = logging.getLogger(__name__)

EMBEDDER_KINDS = ("identity", "random_projection", "pca")
BANK_MAGIC = b"SPEMBANK"
BANK_VERSION = 1


@dataclass(frozen=True)
class Embedder:
    kind: str
    in_dim: int
    out_dim: int
    matrix: np.ndarray | None = None  # (out_dim, in_dim)
    center: np.ndarray | None = None  # subtracted before projecting (pca only)
    seed: int = 0

    def fingerprint(self) -> int:
        h = hashlib.blake2b(digest_size=8, person=b"spem-embed")
        h.update(self.kind.encode() + struct.pack("<II", self.in_dim, self.out_dim))
        for arr in (self.matrix, self.center):
            h.update(b"-" if arr is None else np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return int.from_bytes(h.digest(), "little")


def fit_embedder(id_data, kind: str = "identity", out_dim: int | None = None, seed: int = 0) -> Embedder:
    x = np.asarray(id_data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise FitError("embedder needs a non-empty 2-D batch")
    d = x.shape[1]
    out_dim = d if out_dim is None else int(out_dim)
    if out_dim < 1:
        raise ParameterError("output dimension must be positive", out_dim=out_dim)
    if kind == "identity":
        if out_dim != d:
            raise ParameterError("identity embedder keeps the input dimension", in_dim=d, out_dim=out_dim)
        return Embedder(kind, d, d, seed=seed)
    if kind == "random_projection":
        mat = Stream(seed, "random-projection").normal((out_dim, d), scale=1.0 / math.sqrt(out_dim))
        return Embedder(kind, d, out_dim, matrix=mat, seed=seed)
    if kind == "pca":
        if out_dim > d:
            raise ParameterError("pca cannot produce more components than input dimensions", in_dim=d, out_dim=out_dim)
        center = x.mean(axis=0)
        _, _, vt = np.linalg.svd(x - center, full_matrices=False)
        comps = vt[:out_dim]
        # fix the sign so the largest-magnitude loading of each component is positive
        signs = np.sign(comps[np.arange(out_dim), np.argmax(np.abs(comps), axis=1)])
        comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
        return Embedder(kind, d, out_dim, matrix=comps, center=center, seed=seed)
    raise ParameterError("unknown embedder kind", kind=kind)


def embed(e: Embedder, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != e.in_dim:
        raise DomainError("input has wrong dimension", expected=e.in_dim, got=x.shape[-1])
    if e.kind == "identity":
        return x.copy()
    if e.center is not None:
        x = x - e.center
    return x @ e.matrix.T


def reconstruct(e: Embedder, h) -> np.ndarray:
    """Map an embedding back to input space (exact for identity, projection for pca)."""
    h = np.asarray(h, dtype=np.float64)
    if e.kind == "identity":
        return h.copy()
    if e.kind != "pca":
        raise ParameterError("reconstruction is only defined for identity and pca embedders")
    return h @ e.matrix + e.center


@dataclass(frozen=True)
class ReActConfig:
    quantile: float = 0.9
    sample_count: int = 1000
    seed: int = 0
    threshold: float | None = None

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ParameterError("quantile must lie strictly between 0 and 1", quantile=self.quantile)
        if self.sample_count < 1:
            raise ParameterError("sample_count must be positive", sample_count=self.sample_count)


def nearest_rank_quantile(values, p: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise FitError("quantile of an empty set")
    # round first so that e.g. 0.9 * 100 is rank 90, not 91
    rank = math.ceil(round(p * v.size, 9))
    return float(v[min(max(rank, 1), v.size) - 1])


def calibrate_react(e: Embedder, id_data, p: float = 0.9, sample_count: int = 1000, seed: int = 0) -> float:
    """Clip threshold: nearest-rank ``p``-quantile of all activations of sampled embeddings."""
    x = np.asarray(id_data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise FitError("cannot calibrate the clip threshold on empty data")
    if not 0.0 < p < 1.0:
        raise ParameterError("quantile must lie strictly between 0 and 1", quantile=p)
    if len(x) > sample_count:
        x = x[np.sort(Stream(seed, "react-sample").permutation(len(x))[:sample_count])]
    return nearest_rank_quantile(embed(e, x), p)


def rectify(v, beta: float) -> np.ndarray:
    return np.minimum(np.asarray(v, dtype=np.float64), beta)


@dataclass(frozen=True)
class MemoryBank:
    rows: np.ndarray
    unit_rows: np.ndarray
    beta: float
    fingerprint: int

    @property
    def size(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def _bank_from_rows(rows: np.ndarray, beta: float, fingerprint: int) -> MemoryBank:
    norms = np.linalg.norm(rows, axis=1)
    zero = norms == 0
    if zero.all():
        raise FitError("every bank row has zero norm")
    if zero.any():
        logger.warning("dropping %d zero-norm rows from the memory bank", int(zero.sum()))
        rows, norms = rows[~zero], norms[~zero]
    rows = np.ascontiguousarray(rows)
    return MemoryBank(rows, rows / norms[:, None], float(beta), int(fingerprint))


def build_memory_bank(id_data, e: Embedder, react: ReActConfig = ReActConfig()) -> MemoryBank:
    x = np.atleast_2d(np.asarray(id_data, dtype=np.float64))
    if x.size == 0:
        raise FitError("memory bank needs at least one sample")
    beta = react.threshold
    if beta is None:
        beta = calibrate_react(e, x, react.quantile, react.sample_count, react.seed)
    if not math.isfinite(beta):
        raise FitError("clip threshold is not finite", beta=beta)
    return _bank_from_rows(rectify(embed(e, x), beta), beta, e.fingerprint())


def max_cosine_similarity(bank: MemoryBank, h, chunk: int = 2048):
    """Exact maximum cosine similarity against every bank row.

    Accepts one embedding or a batch.  A zero-norm query has similarity 0.
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    q = np.atleast_2d(h)
    if q.shape[1] != bank.dim:
        raise DomainError("embedding has wrong dimension", expected=bank.dim, got=q.shape[1])
    norms = np.linalg.norm(q, axis=1)
    out = np.zeros(len(q))
    ok = norms > 0
    qn = q[ok] / norms[ok, None]
    best = np.empty(len(qn))
    for start in range(0, len(qn), chunk):
        best[start:start + chunk] = (qn[start:start + chunk] @ bank.unit_rows.T).max(axis=1)
    out[ok] = np.clip(best, -1.0, 1.0)
    return float(out[0]) if single else out


def similarity(bank: MemoryBank, e: Embedder, x):
    """Similarity of raw input(s) ``x`` to the bank: embed, rectify, max cosine."""
    return max_cosine_similarity(bank, rectify(embed(e, x), bank.beta))


def save_bank(bank: MemoryBank, path) -> None:
    head = BANK_MAGIC + struct.pack("<IIIdQ", BANK_VERSION, bank.dim, bank.size, bank.beta, bank.fingerprint)
    atomic_write_bytes(path, head + np.ascontiguousarray(bank.rows, dtype="<f8").tobytes())


def load_bank(path, embedder: Embedder | None = None) -> MemoryBank:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError("cannot read bank file", path=str(path), reason=exc.strerror) from exc
    r = ByteReader(blob, str(path))
    r.expect_magic(BANK_MAGIC)
    version, dim, n, beta, fp = r.unpack("<IIIdQ")
    if version != BANK_VERSION:
        raise FormatError("unsupported bank file version", path=str(path), version=version)
    rows = r.array(n * dim, "<f8").reshape(n, dim)
    r.expect_end()
    if embedder is not None and embedder.fingerprint() != fp:
        raise FormatError("bank was built with a different embedder", path=str(path),
                          bank_fingerprint=f"{fp:016x}", embedder_fingerprint=f"{embedder.fingerprint():016x}")
    norms = np.linalg.norm(rows, axis=1)
    return MemoryBank(rows, rows / norms[:, None], beta, fp)
