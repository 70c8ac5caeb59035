"""Resilient batch-norm statistics.

Target statistics are tracked with an exponential moving average of test-batch
statistics and then pulled back toward the source statistics by a gradient step
on the squared 2-Wasserstein distance between the per-channel Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

SIGMA_FLOOR = 1e-6
DEFAULT_EPS = 1e-5


class StatsChoice(str, Enum):
    BATCH = "batch"
    TARGET = "target"
    SOURCE = "source"


def _vec(v, n: int | None = None) -> np.ndarray:
    a = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if a.ndim != 1:
        raise ValueError(f"expected a per-channel vector, got shape {a.shape}")
    if n is not None and a.shape[0] != n:
        raise ValueError(f"channel mismatch: expected {n}, got {a.shape[0]}")
    return a


def check_rates(nu_b: float, eta_t: float) -> None:
    if not 0.0 <= nu_b <= 1.0:
        raise ValueError(f"nu_b must lie in [0, 1], got {nu_b}")
    if eta_t < 0.0:
        raise ValueError(f"eta_t must be >= 0, got {eta_t}")
    if eta_t >= 0.5:
        # contraction factor is 1 - 2*eta_t; at or past 0.5 the step overshoots
        raise ValueError(f"eta_t must be < 0.5, got {eta_t}")


@dataclass
class BatchStats:
    mu_b: np.ndarray
    sigma_b: np.ndarray

    @property
    def var_b(self) -> np.ndarray:
        return self.sigma_b**2


@dataclass
class NormState:
    """Per-channel statistics and affine parameters of one normalization layer.

    ``gamma`` and ``beta`` may be views into a network's parameter vector; the
    update functions below never touch them, so a state derived with
    :func:`ema_update` or :func:`align_step` keeps pointing at the same arrays.
    """

    mu_s: np.ndarray
    sigma_s: np.ndarray
    mu_t: np.ndarray
    sigma_t: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    nu_b: float = 0.05
    eta_t: float = 0.01
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        self.mu_s = _vec(self.mu_s)
        c = self.mu_s.shape[0]
        self.sigma_s = _vec(self.sigma_s, c)
        self.mu_t = _vec(self.mu_t, c)
        self.sigma_t = _vec(self.sigma_t, c)
        if self.gamma.shape != (c,) or self.beta.shape != (c,):
            raise ValueError("gamma/beta must have one entry per channel")
        if np.any(self.sigma_s <= 0) or np.any(self.sigma_t <= 0):
            raise ValueError("sigma_s and sigma_t must be positive")
        check_rates(self.nu_b, self.eta_t)

    @classmethod
    def from_source(cls, mu_s, sigma_s, gamma=None, beta=None, **kw) -> NormState:
        """Start a test-time state with the target statistics copied from source."""
        mu_s = _vec(mu_s)
        sigma_s = _vec(sigma_s, mu_s.shape[0])
        c = mu_s.shape[0]
        gamma = np.ones(c) if gamma is None else gamma
        beta = np.zeros(c) if beta is None else beta
        return cls(mu_s, sigma_s, mu_s.copy(), sigma_s.copy(), gamma, beta, **kw)

    @property
    def channels(self) -> int:
        return self.mu_s.shape[0]

    @property
    def var_t(self) -> np.ndarray:
        return self.sigma_t**2

    @property
    def var_s(self) -> np.ndarray:
        return self.sigma_s**2


def compute_batch_stats(x: np.ndarray) -> BatchStats:
    """Biased per-channel mean and std over every axis except axis 1."""
    x = np.asarray(x)
    if x.ndim < 2 or x.size == 0:
        raise ValueError(f"cannot compute batch statistics of shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=axes)
    shape = [1, -1] + [1] * (x.ndim - 2)
    var = np.mean((x64 - mu.reshape(shape)) ** 2, axis=axes)
    return BatchStats(mu, np.sqrt(var))


def ema_update(state: NormState, bs: BatchStats) -> NormState:
    c = state.channels
    mu_b = _vec(bs.mu_b, c)
    var_b = _vec(bs.sigma_b, c) ** 2
    nu = state.nu_b
    mu_t = (1.0 - nu) * state.mu_t + nu * mu_b
    var_t = (1.0 - nu) * state.var_t + nu * var_b
    sigma_t = np.maximum(np.sqrt(var_t), SIGMA_FLOOR)
    return replace(state, mu_t=mu_t, sigma_t=sigma_t)


def wasserstein_sq(state: NormState) -> np.ndarray:
    d = state.mu_s - state.mu_t
    w = d * d + (state.sigma_s - state.sigma_t) ** 2
    # the expanded form s^2 + t^2 - 2st can round to a tiny negative
    return np.maximum(w, 0.0)


def w2_grad_mu(state: NormState) -> np.ndarray:
    return 2.0 * (state.mu_t - state.mu_s)


def w2_grad_sigma(state: NormState) -> np.ndarray:
    return 2.0 * state.sigma_t - 2.0 * state.sigma_s


def align_step(state: NormState) -> NormState:
    eta = state.eta_t
    mu_t = state.mu_t - eta * w2_grad_mu(state)
    sigma_t = state.sigma_t - eta * w2_grad_sigma(state)
    return replace(state, mu_t=mu_t, sigma_t=np.maximum(sigma_t, SIGMA_FLOOR))


@dataclass
class DivergenceGrads:
    w2_grad_mu: np.ndarray
    w2_grad_sigma: np.ndarray
    kl_grad_sigma: np.ndarray
    js_grad_sigma: np.ndarray
    extra: dict = field(default_factory=dict)


def divergence_grad_diagnostics(state: NormState) -> DivergenceGrads:
    """Sigma-gradients of W2^2, KL and JS between target and source Gaussians.

    KL and JS carry 1/sigma_t (and 1/sigma_t^3) factors, so they blow up as the
    target std collapses while the W2^2 gradient stays bounded by 2*sigma_s.
    """
    st, ss = state.sigma_t, state.sigma_s
    dmu2 = (state.mu_t - state.mu_s) ** 2
    kl = (st**2 - ss**2) / (st * ss**2)
    js = st / (2 * ss**2) - ss**2 / (2 * st**3) + dmu2 / (2 * st**3)
    return DivergenceGrads(
        w2_grad_mu=w2_grad_mu(state),
        w2_grad_sigma=w2_grad_sigma(state),
        kl_grad_sigma=kl,
        js_grad_sigma=js,
        extra={
            "kl_grad_mu": (state.mu_t - state.mu_s) / ss**2,
            "js_grad_mu": (1 / (2 * ss**2) + 1 / (2 * st**2)) * (state.mu_t - state.mu_s),
            # derivative of the symmetric objective itself; the mean term enters with a
            # minus sign, unlike the published closed form above (identical when mu_t == mu_s)
            "js_grad_sigma_exact": st / (2 * ss**2) - ss**2 / (2 * st**3) - dmu2 / (2 * st**3),
        },
    )


def _channel_shape(ndim: int) -> list[int]:
    return [1, -1] + [1] * (ndim - 2)


def standardize(x: np.ndarray, mu: np.ndarray, var: np.ndarray, eps: float) -> np.ndarray:
    """(x - mu) / sqrt(var + eps), channel axis 1, computed in x's dtype."""
    shape = _channel_shape(x.ndim)
    inv = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)).astype(x.dtype)
    return (x - np.asarray(mu).astype(x.dtype).reshape(shape)) * inv.reshape(shape)


def affine(xhat: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    shape = _channel_shape(xhat.ndim)
    g = np.asarray(gamma).astype(xhat.dtype).reshape(shape)
    b = np.asarray(beta).astype(xhat.dtype).reshape(shape)
    return g * xhat + b


def select_stats(x: np.ndarray, choice: StatsChoice | str, state: NormState):
    choice = StatsChoice(choice)
    if choice is StatsChoice.BATCH:
        bs = compute_batch_stats(x)
        return bs.mu_b, bs.var_b
    if choice is StatsChoice.TARGET:
        return state.mu_t, state.var_t
    return state.mu_s, state.var_s


def normalize(x: np.ndarray, stats_choice: StatsChoice | str, state: NormState) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[1] != state.channels:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, state has {state.channels}")
    mu, var = select_stats(x, stats_choice, state)
    return affine(standardize(x, mu, var, state.eps), state.gamma, state.beta)
