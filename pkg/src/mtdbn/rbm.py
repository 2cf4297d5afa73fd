"""Typed restricted Boltzmann machines.

Three visible unit types share one bipartite structure and one hidden
posterior ``sigmoid(b + v @ W)``; they differ only in the generative side:

* ``binary`` -- Bernoulli visibles, mean ``sigmoid(a + W h)``
* ``real``   -- unit-variance Gaussian visibles, mean ``a + W h``
* ``count``  -- constrained Poisson visibles, rates ``M * softmax(a + W h)``
  where ``M`` is the row's document length

Training is sparse CD-k on minibatches. Arrays are float64 throughout and
batches are row-major ``(batch, n_visible)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, DivergenceError

__all__ = [
    "UnitType",
    "RbmParams",
    "SparseCdConfig",
    "DEFAULT_LEARNING_RATES",
    "sigmoid",
    "energy",
    "hidden_posterior",
    "visible_mean",
    "sample_hidden",
    "sample_visible",
    "cd_increments",
    "cd_update",
    "reconstruction_error",
    "init_params",
    "train_rbm",
    "check_visible",
    "params_to_bytes",
    "params_from_bytes",
    "save_params",
    "load_params",
]

WEIGHT_LIMIT = 1e6
PARAMS_MAGIC = b"MTDBN1"


class UnitType(str, Enum):
    BINARY = "binary"
    REAL = "real"
    COUNT = "count"

    @property
    def code(self) -> int:
        return _UNIT_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "UnitType":
        for unit, c in _UNIT_CODES.items():
            if c == code:
                return unit
        raise ContractError(f"unknown unit type code {code}")


_UNIT_CODES = {UnitType.BINARY: 0, UnitType.REAL: 1, UnitType.COUNT: 2}

# Typed step sizes used for the bottom layer when nothing else is configured.
DEFAULT_LEARNING_RATES = {
    UnitType.BINARY: 0.1,
    UnitType.REAL: 0.01,
    UnitType.COUNT: 0.02,
}


@dataclass
class RbmParams:
    unit_type: UnitType
    W: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.unit_type = UnitType(self.unit_type)
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.a = np.array(self.a, dtype=np.float64).reshape(-1)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        n, k = self.W.shape
        if self.a.shape != (n,) or self.b.shape != (k,):
            raise ContractError(
                f"inconsistent RBM shapes: W {self.W.shape}, a {self.a.shape}, b {self.b.shape}"
            )
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.a))
                and np.all(np.isfinite(self.b))):
            raise ContractError("RBM parameters must be finite")

    @property
    def n_visible(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "RbmParams":
        return RbmParams(self.unit_type, self.W.copy(), self.a.copy(), self.b.copy())

    def __eq__(self, other):
        if not isinstance(other, RbmParams):
            return NotImplemented
        return (self.unit_type == other.unit_type
                and np.array_equal(self.W, other.W)
                and np.array_equal(self.a, other.a)
                and np.array_equal(self.b, other.b))


@dataclass(frozen=True)
class SparseCdConfig:
    """Hyperparameters for sparse contrastive divergence.

    ``sparsity_weight`` is added to the update unscaled by the learning rate,
    so it is normally much smaller than ``learning_rate``.
    """

    learning_rate: float = 0.1
    sparsity_target: float = 0.2
    sparsity_weight: float = 0.01
    cd_steps: int = 1
    minibatch_size: int = 100
    epochs: int = 10
    rng_seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            # zero is allowed: it turns cd_update into a pure sparsity step
            raise ContractError("learning_rate must be non-negative")
        if not 0.0 < self.sparsity_target < 1.0:
            raise ContractError("sparsity_target must lie in (0, 1)")
        if not self.sparsity_weight >= 0:
            raise ContractError("sparsity_weight must be non-negative")
        if self.cd_steps < 1 or self.minibatch_size < 1 or self.epochs < 0:
            raise ContractError("cd_steps and minibatch_size must be >= 1, epochs >= 0")

    @classmethod
    def for_unit(cls, unit_type, **overrides) -> "SparseCdConfig":
        overrides.setdefault("learning_rate", DEFAULT_LEARNING_RATES[UnitType(unit_type)])
        return cls(**overrides)


def sigmoid(z):
    """Logistic function, safe for any finite input (no overflow warnings)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def check_visible(unit_type, v) -> np.ndarray:
    """Validate a visible vector/batch against the unit domain.

    Binary units accept values in [0, 1] so that posterior probabilities can
    be fed to an upper binary layer.
    """
    unit_type = UnitType(unit_type)
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{unit_type.value} visibles must be finite")
    if unit_type is UnitType.BINARY:
        if np.any((v < 0) | (v > 1)):
            raise ContractError("binary visibles must lie in [0, 1]")
    elif unit_type is UnitType.COUNT:
        if np.any(v < 0) or np.any(v != np.floor(v)):
            raise ContractError("count visibles must be non-negative integers")
    return v


def _check_dims(params: RbmParams, v, axis_len: int, what: str):
    if v.shape[-1] != axis_len:
        raise ContractError(f"{what} has length {v.shape[-1]}, expected {axis_len}")


def energy(params: RbmParams, v, h) -> float:
    v = check_visible(params.unit_type, v)
    h = np.asarray(h, dtype=np.float64)
    if v.ndim != 1 or h.ndim != 1:
        raise ContractError("energy takes single visible and hidden vectors")
    _check_dims(params, v, params.n_visible, "visible vector")
    _check_dims(params, h, params.n_hidden, "hidden vector")
    interaction = -float(params.b @ h) - float(v @ params.W @ h)
    if params.unit_type is UnitType.BINARY:
        return -float(params.a @ v) + interaction
    if params.unit_type is UnitType.REAL:
        return 0.5 * float(np.sum((v - params.a) ** 2)) + interaction
    log_fact = sum(math.lgamma(x + 1.0) for x in v)
    return log_fact - float(params.a @ v) + interaction


def hidden_posterior(params: RbmParams, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    _check_dims(params, v, params.n_visible, "visible input")
    return sigmoid(v @ params.W + params.b)


def visible_mean(params: RbmParams, h, doc_length=None) -> np.ndarray:
    """Type-specific generative mean given hidden states or probabilities.

    ``doc_length`` (scalar or one value per row) is required for count units.
    """
    h = np.asarray(h, dtype=np.float64)
    _check_dims(params, h, params.n_hidden, "hidden input")
    mu = h @ params.W.T + params.a
    if params.unit_type is UnitType.BINARY:
        return sigmoid(mu)
    if params.unit_type is UnitType.REAL:
        return mu
    if doc_length is None:
        raise ContractError("count units need the document length to reconstruct")
    m = np.asarray(doc_length, dtype=np.float64)
    if mu.ndim == 2 and m.ndim == 1:
        m = m[:, None]
    z = np.exp(mu - mu.max(axis=-1, keepdims=True))
    return m * (z / z.sum(axis=-1, keepdims=True))


def sample_hidden(params: RbmParams, v, rng: np.random.Generator) -> np.ndarray:
    p = hidden_posterior(params, v)
    return (rng.random(p.shape) < p).astype(np.float64)


def sample_visible(params: RbmParams, h, rng: np.random.Generator, doc_length=None) -> np.ndarray:
    mean = visible_mean(params, h, doc_length)
    if params.unit_type is UnitType.BINARY:
        return (rng.random(mean.shape) < mean).astype(np.float64)
    if params.unit_type is UnitType.REAL:
        return mean + rng.standard_normal(mean.shape)
    return rng.poisson(mean).astype(np.float64)


def _doc_length(params: RbmParams, v):
    if params.unit_type is UnitType.COUNT:
        return v.sum(axis=-1)
    return None


def _guard(params: RbmParams, epoch=None, batch=None):
    arrays = (params.W, params.a, params.b)
    if not all(np.all(np.isfinite(x)) for x in arrays):
        raise DivergenceError("non-finite RBM parameters", epoch=epoch, batch=batch)
    if np.max(np.abs(params.W), initial=0.0) > WEIGHT_LIMIT:
        raise DivergenceError(f"|W| exceeded {WEIGHT_LIMIT:g}", epoch=epoch, batch=batch)


def cd_increments(v, h_pos, v_bar, h_hat, cfg: SparseCdConfig):
    """Minibatch-averaged parameter increments ``(dW, da, db)`` from CD statistics."""
    n_rows = v.shape[0]
    eta, gamma = cfg.learning_rate, cfg.sparsity_weight
    sparse = cfg.sparsity_target - h_pos
    dW = (eta * (v.T @ h_pos - v_bar.T @ h_hat) + gamma * (v.T @ sparse)) / n_rows
    db = (eta * (h_pos - h_hat) + gamma * sparse).sum(axis=0) / n_rows
    da = eta * (v - v_bar).sum(axis=0) / n_rows
    return dW, da, db


def cd_update(params: RbmParams, batch, cfg: SparseCdConfig, rng: np.random.Generator,
              *, epoch=None, batch_index=None) -> RbmParams:
    """One sparse CD-k step on a minibatch; returns new parameters.

    Positive statistics use the posterior of the data. The chain starts from
    the data, samples binary hidden states, and the visible statistic is the
    type-specific mean given the final hidden sample.
    """
    v = check_visible(params.unit_type, np.atleast_2d(batch))
    _check_dims(params, v, params.n_visible, "batch")
    m = _doc_length(params, v)

    h_pos = hidden_posterior(params, v)
    h_hat = (rng.random(h_pos.shape) < h_pos).astype(np.float64)
    for _ in range(cfg.cd_steps - 1):
        v_sample = sample_visible(params, h_hat, rng, m)
        h_hat = sample_hidden(params, v_sample, rng)
    v_bar = visible_mean(params, h_hat, m)

    dW, da, db = cd_increments(v, h_pos, v_bar, h_hat, cfg)

    new_W = params.W + dW
    new_a = params.a + da
    new_b = params.b + db
    for arr in (new_W, new_a, new_b):
        if not np.all(np.isfinite(arr)):
            raise DivergenceError("non-finite CD update", epoch=epoch, batch=batch_index)
    updated = RbmParams(params.unit_type, new_W, new_a, new_b)
    _guard(updated, epoch, batch_index)
    return updated


def reconstruction_error(params: RbmParams, data) -> float:
    """Mean per-entry mean-field reconstruction error.

    binary: cross-entropy; real: half squared error; count: Poisson
    negative log-likelihood (including ``log v!``).
    """
    v = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if v.shape[0] == 0:
        return 0.0
    recon = visible_mean(params, hidden_posterior(params, v), _doc_length(params, v))
    if params.unit_type is UnitType.BINARY:
        p = np.clip(recon, 1e-12, 1 - 1e-12)
        err = -(v * np.log(p) + (1 - v) * np.log1p(-p))
    elif params.unit_type is UnitType.REAL:
        err = 0.5 * (v - recon) ** 2
    else:
        lam = np.maximum(recon, 1e-300)
        log_fact = np.vectorize(math.lgamma)(v + 1.0)
        err = lam - v * np.log(lam) + log_fact
    return float(err.mean())


def init_params(unit_type, n_visible: int, n_hidden: int, rng: np.random.Generator,
                scale: float = 0.01) -> RbmParams:
    if n_visible < 1 or n_hidden < 1:
        raise ContractError("RBM sizes must be positive")
    W = rng.normal(0.0, scale, size=(n_visible, n_hidden))
    return RbmParams(UnitType(unit_type), W, np.zeros(n_visible), np.zeros(n_hidden))


def train_rbm(data, n_hidden: int, cfg: SparseCdConfig, unit_type=UnitType.BINARY,
              init: RbmParams | None = None):
    """Train a typed RBM by minibatch sparse CD.

    Returns ``(params, trace)`` where ``trace[0]`` is the reconstruction error
    at initialization and ``trace[e]`` the error after epoch ``e``.
    """
    unit_type = UnitType(unit_type)
    v = check_visible(unit_type, np.atleast_2d(data))
    if v.shape[0] == 0:
        raise ContractError("train_rbm needs at least one instance")
    rng = np.random.default_rng(cfg.rng_seed)
    params = init.copy() if init is not None else init_params(unit_type, v.shape[1], n_hidden, rng)
    if params.unit_type is not unit_type or params.n_visible != v.shape[1]:
        raise ContractError("initial parameters do not match the data")

    trace = [reconstruction_error(params, v)]
    n = v.shape[0]
    bs = cfg.minibatch_size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for bi, start in enumerate(range(0, n, bs)):
            rows = v[order[start:start + bs]]
            params = cd_update(params, rows, cfg, rng, epoch=epoch, batch_index=bi)
        trace.append(reconstruction_error(params, v))
    return params, trace


# -- flat binary format -----------------------------------------------------
# magic "MTDBN1" | uint8 unit code | uint8 pad | uint64 N | uint64 K |
# W (N*K, row-major) | a (N) | b (K); all little-endian float64.

_HEADER = struct.Struct("<6sBxQQ")


def params_to_bytes(params: RbmParams) -> bytes:
    head = _HEADER.pack(PARAMS_MAGIC, params.unit_type.code, params.n_visible, params.n_hidden)
    body = b"".join(np.ascontiguousarray(x, dtype="<f8").tobytes()
                    for x in (params.W, params.a, params.b))
    return head + body


def params_from_bytes(buf: bytes) -> RbmParams:
    if len(buf) < _HEADER.size:
        raise ContractError("truncated RBM block")
    magic, code, n, k = _HEADER.unpack_from(buf, 0)
    if magic != PARAMS_MAGIC:
        raise ContractError(f"bad RBM magic {magic!r}")
    expected = _HEADER.size + 8 * (n * k + n + k)
    if len(buf) != expected:
        raise ContractError(f"RBM block is {len(buf)} bytes, expected {expected}")
    flat = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    W = flat[:n * k].reshape(n, k)
    a = flat[n * k:n * k + n]
    b = flat[n * k + n:]
    return RbmParams(UnitType.from_code(code), W, a, b)


def save_params(params: RbmParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> RbmParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
