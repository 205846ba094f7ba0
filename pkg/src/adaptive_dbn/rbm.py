"""Bernoulli restricted Boltzmann machine.

Energy, exact enumeration for tiny models (used as oracles), the two
conditional distributions and contrastive-divergence updates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

ENUMERATION_LIMIT = 24


class ContractError(ValueError):
    """Inputs violate an operation's dimensional or range contract."""


class EnumerationTooLarge(ValueError):
    """Exact enumeration was requested on a model with too many units."""


@dataclass(frozen=True, eq=False)
class RbmParams:
    """Visible bias ``b`` (I,), hidden bias ``c`` (J,), weights ``W`` (I, J)."""

    b: np.ndarray
    c: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        for name in ("b", "c", "W"):
            # one canonical layout keeps BLAS summation order, and so outputs, reproducible
            arr = np.array(getattr(self, name), dtype=np.float64, order="C")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.b.ndim != 1 or self.c.ndim != 1 or self.W.ndim != 2:
            raise ContractError("b and c must be vectors, W a matrix")
        if self.W.shape != (self.b.size, self.c.size):
            raise ContractError(
                f"W has shape {self.W.shape}, expected ({self.b.size}, {self.c.size})")
        if self.b.size < 1 or self.c.size < 1:
            raise ContractError("an RBM needs at least one visible and one hidden unit")
        if not (np.isfinite(self.b).all() and np.isfinite(self.c).all()
                and np.isfinite(self.W).all()):
            raise ContractError("RBM parameters must be finite")

    @property
    def n_visible(self) -> int:
        return self.b.size

    @property
    def n_hidden(self) -> int:
        return self.c.size

    @classmethod
    def zeros(cls, n_visible: int, n_hidden: int) -> "RbmParams":
        return cls(np.zeros(n_visible), np.zeros(n_hidden), np.zeros((n_visible, n_hidden)))

    @classmethod
    def random(cls, n_visible: int, n_hidden: int, rng: np.random.Generator,
               std: float = 0.01) -> "RbmParams":
        """Gaussian weights with the given std, zero biases."""
        return cls(np.zeros(n_visible), np.zeros(n_hidden),
                   rng.normal(0.0, std, size=(n_visible, n_hidden)))

    @classmethod
    def for_data(cls, x: np.ndarray, n_hidden: int, rng: np.random.Generator,
                 std: float = 0.01) -> "RbmParams":
        """Random weights, zero hidden bias, visible bias at the logit of the data mean."""
        mean = np.clip(np.asarray(x, dtype=np.float64).mean(axis=0), 1e-3, 1 - 1e-3)
        return cls(np.log(mean / (1 - mean)), np.zeros(n_hidden),
                   rng.normal(0.0, std, size=(mean.size, n_hidden)))

    def equals(self, other: "RbmParams") -> bool:
        """Bitwise equality of all parameters."""
        return (self.W.shape == other.W.shape and np.array_equal(self.b, other.b)
                and np.array_equal(self.c, other.c) and np.array_equal(self.W, other.W))


class BinaryState(NamedTuple):
    v: np.ndarray
    h: np.ndarray


@dataclass(frozen=True, eq=False)
class ParamDelta:
    """Per-group parameter change (or gradient) with the shapes of RbmParams."""

    db: np.ndarray
    dc: np.ndarray
    dW: np.ndarray

    def scaled(self, alpha: float) -> "ParamDelta":
        return ParamDelta(alpha * self.db, alpha * self.dc, alpha * self.dW)


@dataclass(frozen=True)
class CdConfig:
    learning_rate: float = 0.05
    cd_steps: int = 1
    batch_size: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.cd_steps < 1:
            raise ValueError("cd_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _check_visible(params: RbmParams, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (params.n_visible,):
        raise ContractError(f"visible vector has length {v.shape[-1:]}, expected {params.n_visible}")
    return v


def _check_hidden(params: RbmParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1:] != (params.n_hidden,):
        raise ContractError(f"hidden vector has length {h.shape[-1:]}, expected {params.n_hidden}")
    return h


def energy(params: RbmParams, v, h):
    """E(v, h) = -b.v - c.h - v^T W h. Batched over leading axes."""
    v = _check_visible(params, v)
    h = _check_hidden(params, h)
    return -(v @ params.b) - (h @ params.c) - np.einsum("...i,ij,...j->...", v, params.W, h)


def free_energy(params: RbmParams, v):
    """F(v) = -b.v - sum_j softplus(c_j + v W_j), so p(v) = exp(-F(v)) / Z."""
    v = _check_visible(params, v)
    return -(v @ params.b) - np.logaddexp(0.0, v @ params.W + params.c).sum(axis=-1)


def hidden_conditional(params: RbmParams, v) -> np.ndarray:
    """p(h_j = 1 | v) = sigmoid(c_j + sum_i W_ij v_i)."""
    return expit(_check_visible(params, v) @ params.W + params.c)


def visible_conditional(params: RbmParams, h) -> np.ndarray:
    """p(v_i = 1 | h) = sigmoid(b_i + sum_j W_ij h_j)."""
    return expit(_check_hidden(params, h) @ params.W.T + params.b)


def all_binary(n: int) -> np.ndarray:
    """Every binary vector of length n as rows of a (2**n, n) array."""
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(2 ** n, n)


def _guard(params: RbmParams) -> None:
    if params.n_visible + params.n_hidden > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(
            f"exact enumeration needs I + J <= {ENUMERATION_LIMIT}, "
            f"got {params.n_visible} + {params.n_hidden}")


def log_partition_exact(params: RbmParams) -> float:
    """log Z by enumerating the smaller layer and summing the other out analytically."""
    _guard(params)
    if params.n_visible <= params.n_hidden:
        return float(logsumexp(-free_energy(params, all_binary(params.n_visible))))
    hs = all_binary(params.n_hidden)
    neg_f = hs @ params.c + np.logaddexp(0.0, hs @ params.W.T + params.b).sum(axis=1)
    return float(logsumexp(neg_f))


def joint_probability(params: RbmParams, v, h):
    """p(v, h) = exp(-E(v, h)) / Z."""
    return np.exp(-energy(params, v, h) - log_partition_exact(params))


def log_likelihood(params: RbmParams, data) -> float:
    """Exact sum over the rows of ``data`` of log p(v)."""
    data = np.atleast_2d(_check_visible(params, data))
    return float(-free_energy(params, data).sum() - len(data) * log_partition_exact(params))


def exact_loglik_gradient(params: RbmParams, data) -> ParamDelta:
    """Exact gradient of sum_n log p(v_n) with the model term by enumeration."""
    _guard(params)
    data = np.atleast_2d(_check_visible(params, data))
    n = len(data)

    ph_data = hidden_conditional(params, data)
    vs = all_binary(params.n_visible)
    log_pv = -free_energy(params, vs)
    pv = np.exp(log_pv - logsumexp(log_pv))
    ph_model = hidden_conditional(params, vs)

    return ParamDelta(
        db=data.sum(axis=0) - n * (pv @ vs),
        dc=ph_data.sum(axis=0) - n * (pv @ ph_model),
        dW=data.T @ ph_data - n * (vs * pv[:, None]).T @ ph_model,
    )


@dataclass(frozen=True, eq=False)
class _CdStats:
    v_neg: np.ndarray
    h_neg: np.ndarray


def _cd_step(params: RbmParams, batch: np.ndarray, config: CdConfig,
             rng: np.random.Generator):
    h_pos = hidden_conditional(params, batch)
    h_prob = h_pos
    for _ in range(config.cd_steps):
        h_sample = (rng.random(h_prob.shape) < h_prob).astype(np.float64)
        v_neg = visible_conditional(params, h_sample)
        h_prob = hidden_conditional(params, v_neg)

    scale = config.learning_rate / len(batch)
    delta = ParamDelta(
        db=scale * (batch.sum(axis=0) - v_neg.sum(axis=0)),
        dc=scale * (h_pos.sum(axis=0) - h_prob.sum(axis=0)),
        dW=scale * (batch.T @ h_pos - v_neg.T @ h_prob),
    )
    new = RbmParams(params.b + delta.db, params.c + delta.dc, params.W + delta.dW)
    return new, delta, _CdStats(v_neg, h_prob)


def cd_update(params: RbmParams, batch, config: CdConfig, rng: np.random.Generator):
    """One CD-k step on a batch.

    Hidden states are sampled between Gibbs steps; the negative-phase
    statistics use mean-field probabilities. Returns ``(new_params, delta)``.
    """
    batch = np.atleast_2d(_check_visible(params, batch))
    if len(batch) == 0:
        raise ValueError("cd_update needs a non-empty batch")
    if batch.min() < 0 or batch.max() > 1:
        raise ContractError("visible inputs must lie in [0, 1]")
    new, delta, _ = _cd_step(params, batch, config, rng)
    return new, delta
