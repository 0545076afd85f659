"""Per-token continuous diffusion head with an exact Gaussian-mixture denoiser.

Token values follow a variance-preserving process
``x_t = alpha_t x_0 + sigma_t eps`` with ``alpha_t = cos(pi t / 2)``.  The
denoiser is the exact posterior mean of a diagonal Gaussian mixture, so
sampler error is pure discretisation error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np
from scipy.special import ndtr


@dataclass(frozen=True)
class VpSchedule:
    """Cosine VP schedule; samplers start at ``1 - t_eps`` where log-SNR is finite."""

    t_eps: float = 1e-3

    def alpha(self, t):
        return np.cos(0.5 * np.pi * np.asarray(t, dtype=float))

    def sigma(self, t):
        return np.sin(0.5 * np.pi * np.asarray(t, dtype=float))

    def lam(self, t):
        t = np.asarray(t, dtype=float)
        return np.log(self.alpha(t)) - np.log(self.sigma(t))

    def t_of_lam(self, lam):
        return 2.0 / np.pi * np.arctan(np.exp(-np.asarray(lam, dtype=float)))

    @property
    def t_start(self) -> float:
        return 1.0 - self.t_eps


@dataclass
class GaussianMixture:
    """Diagonal Gaussian mixture; zero variances give point masses."""

    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float).reshape(len(self.weights), -1)
        self.vars = np.asarray(self.vars, dtype=float).reshape(self.means.shape)
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.vars < 0):
            raise ValueError("variances must be non-negative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_dict(cls, data) -> "GaussianMixture":
        return cls(data["weights"], data["means"], data["vars"])

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "vars": self.vars.tolist()}

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def sample(self, n, rng):
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.vars[k]) * rng.standard_normal((n, self.dim))

    def mean(self):
        return self.weights @ self.means

    def cdf(self, x):
        if self.dim != 1:
            raise ValueError("cdf is only defined for one-dimensional mixtures")
        x = np.asarray(x, dtype=float)[..., None]
        mu, sd = self.means[:, 0], np.sqrt(self.vars[:, 0])
        z = np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), np.where(x >= mu, np.inf, -np.inf))
        return ndtr(z) @ self.weights

    def ppf(self, u, tol=1e-12):
        """Quantile function by vectorised bisection."""
        u = np.asarray(u, dtype=float)
        spread = np.sqrt(self.vars[:, 0]).max() * 12 + 1.0
        lo = np.full(u.shape, self.means.min() - spread)
        hi = np.full(u.shape, self.means.max() + spread)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        return 0.5 * (lo + hi)

    def posterior_mean(self, x_t, alpha, sigma):
        """``E[x0 | x_t]`` under ``x_t = alpha x0 + sigma eps``."""
        x = np.atleast_2d(np.asarray(x_t, dtype=float))
        var_t = alpha ** 2 * self.vars + sigma ** 2  # (K, d)
        diff = x[:, None, :] - alpha * self.means  # (B, K, d)
        scaled = diff / var_t
        logr = (np.log(self.weights) - 0.5 * np.log(2 * np.pi * var_t).sum(axis=1)
                - 0.5 * np.einsum("bkd,bkd->bk", diff, scaled))
        r = np.exp(logr - logr.max(axis=1, keepdims=True))
        r /= r.sum(axis=1, keepdims=True)
        # per-component mean is mu + alpha v (x - alpha mu) / var_t
        return r @ self.means + np.einsum("bk,bkd->bd", r, scaled * (alpha * self.vars))


def gm_denoiser(gm: GaussianMixture, x_t, t: float, vp: VpSchedule = VpSchedule()):
    """Exact noise prediction ``(x_t - alpha_t E[x0|x_t]) / sigma_t``."""
    if t <= 0:
        raise ValueError("the denoiser is undefined at t = 0")
    a, s = float(vp.alpha(t)), float(vp.sigma(t))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    return (x_t - a * gm.posterior_mean(x_t, a, s)) / s


def ddpm_step(x_t, eps_hat, t, s, tau, rng, vp: VpSchedule = VpSchedule()):
    """Ancestral step from ``t`` to ``s`` with noise scaled by temperature ``tau``; noiseless at ``s = 0``."""
    if not 0 <= s < t <= 1:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    a_t, s_t = float(vp.alpha(t)), float(vp.sigma(t))
    a_s, s_s = float(vp.alpha(s)), float(vp.sigma(s))
    x0_hat = (x_t - s_t * eps_hat) / a_t
    a_ts = a_t / a_s
    var_ts = s_t ** 2 - a_ts ** 2 * s_s ** 2
    mean = a_ts * s_s ** 2 / s_t ** 2 * x_t + a_s * var_ts / s_t ** 2 * x0_hat
    if s == 0 or tau == 0:
        return mean
    std = np.sqrt(var_ts * s_s ** 2) / s_t
    return mean + tau * std * rng.standard_normal(np.shape(x_t))


def ddpm_posterior_std(t, s, vp: VpSchedule = VpSchedule()) -> float:
    a_t, s_t = float(vp.alpha(t)), float(vp.sigma(t))
    a_s, s_s = float(vp.alpha(s)), float(vp.sigma(s))
    return float(np.sqrt((s_t ** 2 - (a_t / a_s) ** 2 * s_s ** 2) * s_s ** 2) / s_t)


def _first_order(x_t, eps, t, s, vp):
    # DPM-Solver-1 written as alpha_s * x0_hat + sigma_s * eps, finite at s = 0
    a_t, s_t = float(vp.alpha(t)), float(vp.sigma(t))
    return float(vp.alpha(s)) * (x_t - s_t * eps) / a_t + float(vp.sigma(s)) * eps


def dpms_step(x_t, eps_fn: Callable, t, s, order: int = 1, vp: VpSchedule = VpSchedule()):
    """One DPM-Solver step of order 1 or 2 (midpoint in log-SNR).

    Order 2 falls back to order 1 for a step ending at ``s = 0``.
    """
    if not 0 <= s < t <= 1:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    eps_t = eps_fn(x_t, t)
    if order == 1 or s == 0:
        return _first_order(x_t, eps_t, t, s, vp)
    u = float(vp.t_of_lam(0.5 * (vp.lam(t) + vp.lam(s))))
    x_u = _first_order(x_t, eps_t, t, u, vp)
    return _first_order(x_t, eps_fn(x_u, u), t, s, vp)


@dataclass(frozen=True)
class DdpmTau:
    tau: float = 1.0
    steps: int = 100


@dataclass(frozen=True)
class DpmSolver:
    order: int = 2
    steps: int = 10
    grid: str = "time"  # "time" (uniform in t) or "logsnr" (uniform in lambda)


HeadSampler = Union[DdpmTau, DpmSolver]


def sampler_grid(sampler: HeadSampler, vp: VpSchedule = VpSchedule()) -> np.ndarray:
    """Decreasing time grid from ``vp.t_start`` to 0 with ``sampler.steps`` intervals.

    Uniform in ``t`` by default.  The ``"logsnr"`` grid of DPM-Solver is
    uniform in log-SNR down to ``t_eps``, followed by a final step to 0;
    under the cosine schedule it spends most steps at extreme SNR.
    """
    if sampler.steps < 1:
        raise ValueError("need at least one sampling step")
    if isinstance(sampler, DdpmTau) or sampler.grid == "time":
        return np.linspace(vp.t_start, 0.0, sampler.steps + 1)
    if sampler.grid != "logsnr":
        raise ValueError(f"unknown grid {sampler.grid!r}")
    lams = np.linspace(vp.lam(vp.t_start), vp.lam(vp.t_eps), sampler.steps)
    ts = vp.t_of_lam(lams)
    ts[0] = vp.t_start
    return np.append(ts, 0.0)


def head_nfe(sampler: HeadSampler) -> int:
    """Denoiser evaluations per head call."""
    if isinstance(sampler, DdpmTau) or sampler.order == 1:
        return sampler.steps
    return 2 * sampler.steps - 1


def run_head(gm: GaussianMixture, x_start, sampler: HeadSampler, rng=None,
             vp: VpSchedule = VpSchedule()) -> np.ndarray:
    """Integrate from given starting noise down the sampler grid."""
    x = np.array(x_start, dtype=float, copy=True)
    eps_fn = lambda x, t: gm_denoiser(gm, x, t, vp)  # noqa: E731
    grid = sampler_grid(sampler, vp)
    for t, s in zip(grid[:-1], grid[1:]):
        if isinstance(sampler, DdpmTau):
            x = ddpm_step(x, eps_fn(x, t), t, s, sampler.tau, rng, vp)
        else:
            x = dpms_step(x, eps_fn, t, s, sampler.order, vp)
    return x


def sample_head(gm: GaussianMixture, sampler: HeadSampler, n: int, rng: np.random.Generator,
                vp: VpSchedule = VpSchedule()) -> np.ndarray:
    """Draw ``n`` token values of dimension ``gm.dim``, starting from standard normal noise."""
    if sampler.steps < 1:
        raise ValueError("need at least one sampling step")
    x1 = rng.standard_normal((n, gm.dim))
    return run_head(gm, x1, sampler, rng, vp)
