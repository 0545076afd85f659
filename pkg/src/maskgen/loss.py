"""The unified masked-token objective.

For a clean sequence ``x0`` the loss is

    integral over [t_min, t_max] of  w(t) * E_{x_t ~ q(.|x0)} [ sum over masked i of -log p(x0^i | x_t) ] dt

where ``q`` masks either each token independently with probability
``gamma(t)`` or exactly ``ceil(N gamma(t))`` tokens.  ``loss_mc`` estimates
it by sampling ``t`` and a mask; ``loss_exact`` integrates it exactly over
every mask pattern of every dataset state.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .masking import MASK, ToyDataset
from .models import UNCOND_MASK, cond_array, is_learnable
from .schedule import (DEFAULT_EPSILON, MaskSchedule, TimeWindow, mdm_weight_antiderivative,
                       sample_time, weight)

MASKING_KINDS = ("independent", "fixed")


class ContractError(RuntimeError):
    """A model returned something other than normalised probabilities."""


@dataclass
class LossConfig:
    schedule: MaskSchedule = field(default_factory=MaskSchedule)
    weight: str = "mdm"
    window: TimeWindow = field(default_factory=TimeWindow)
    masking: str = "independent"
    mc_samples: int = 1
    quadrature_points: int = 64
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.masking not in MASKING_KINDS:
            raise ValueError(f"masking must be one of {MASKING_KINDS}")
        if self.weight not in ("constant", "mdm"):
            raise ValueError("weight must be 'constant' or 'mdm'")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.quadrature_points < 16:
            raise ValueError("quadrature_points must be >= 16")

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        return cls(schedule=MaskSchedule.from_config(data.get("schedule", "linear")),
                   weight=data.get("weight", "mdm"),
                   window=TimeWindow(data.get("t_min", 0.0), data.get("t_max", 1.0)),
                   masking=data.get("masking", "independent"),
                   mc_samples=int(data.get("mc_samples", 1)),
                   quadrature_points=int(data.get("quadrature_points", 64)))

    def to_dict(self) -> dict:
        return {"schedule": self.schedule.to_config(), "weight": self.weight,
                "t_min": self.window.t_min, "t_max": self.window.t_max, "masking": self.masking,
                "mc_samples": self.mc_samples, "quadrature_points": self.quadrature_points}


def _checked_predict(model, xt, cond):
    probs = np.asarray(model.predict(xt, cond))
    if probs.shape != xt.shape + (model.vocab_size,):
        raise ContractError(f"prediction shape {probs.shape} does not match {xt.shape + (model.vocab_size,)}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-9):
        raise ContractError("model returned a non-normalised distribution")
    return probs


def _draw(x0, cfg: LossConfig, rng, n):
    """``n`` draws of (t, x_t) for one clean sequence, plus per-draw loss coefficients."""
    t = sample_time(cfg.window, rng, size=n)
    g = np.asarray(cfg.schedule.gamma(t))
    x0 = np.broadcast_to(x0, (n, len(x0)))
    if cfg.masking == "independent":
        xt = np.where(rng.random(x0.shape) < g[:, None], MASK, x0)
    else:
        k = np.clip(np.ceil(np.round(x0.shape[1] * g, 9)), 0, x0.shape[1])
        ranks = np.argsort(np.argsort(rng.random(x0.shape), axis=1), axis=1)
        xt = np.where(ranks < k[:, None], MASK, x0)
    w = np.asarray(weight(cfg.weight, cfg.schedule, t, cfg.epsilon)) * cfg.window.length
    return xt, w[:, None] * (xt == MASK)


def loss_mc_terms(model, x0, cond, cfg: LossConfig, rng: np.random.Generator) -> np.ndarray:
    """Independent single-draw estimates; their mean is ``loss_mc``."""
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 == MASK):
        raise ValueError("x0 must be fully unmasked")
    xt, coef = _draw(x0, cfg, rng, cfg.mc_samples)
    probs = _checked_predict(model, xt, cond_array(cond, len(xt), getattr(model, "num_classes", 0)))
    picked = np.take_along_axis(probs, np.broadcast_to(x0, xt.shape)[..., None], axis=-1)[..., 0]
    nll = -np.log(np.where(coef > 0, picked, 1.0))
    return np.sum(coef * nll, axis=1)


def loss_mc(model, x0, cond, cfg: LossConfig, rng: np.random.Generator) -> float:
    return float(np.mean(loss_mc_terms(model, x0, cond, cfg, rng)))


def loss_grad(model, batch, cfg: LossConfig, rng: np.random.Generator):
    """MC loss averaged over ``batch`` of ``(x0, cond)`` pairs and its parameter gradient.

    Value and gradient use the same sampled times and masks.
    """
    if not is_learnable(model):
        raise TypeError(f"{type(model).__name__} has no parameters to differentiate")
    xs, conds, coefs, targets = [], [], [], []
    for x0, cond in batch:
        x0 = np.asarray(x0, dtype=np.int64)
        xt, coef = _draw(x0, cfg, rng, cfg.mc_samples)
        xs.append(xt)
        coefs.append(coef)
        targets.append(np.broadcast_to(x0, xt.shape))
        conds.append(np.full(len(xt), UNCOND_MASK if cond is None else int(cond)))
    scale = 1.0 / (len(batch) * cfg.mc_samples)
    value, grad = model.nll_grad(np.concatenate(xs), np.concatenate(conds),
                                 np.concatenate(targets), np.concatenate(coefs) * scale)
    return value, grad


# Exact evaluation ------------------------------------------------------------


def _gauss_legendre(a, b, n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def mask_coefficients(cfg: LossConfig, num_positions: int) -> np.ndarray:
    """``c[k]`` = integral of ``w(t) * P(one particular k-token mask | t)`` over the window.

    Entry ``k = 0`` is zero since an empty mask contributes nothing.
    """
    n = num_positions
    sched, (a, b) = cfg.schedule, (cfg.window.t_min, cfg.window.t_max)
    ks = np.arange(n + 1)
    out = np.zeros(n + 1)
    if cfg.masking == "independent":
        if cfg.weight == "constant":
            t, w = _gauss_legendre(a, b, cfg.quadrature_points)
            g = np.asarray(sched.gamma(t))[:, None]
            out[1:] = (w[:, None] * g ** ks[1:] * (1 - g) ** (n - ks[1:])).sum(axis=0)
        else:
            # substitute g = gamma(t): for k >= 1 the 1/g weight cancels and the
            # integrand is the polynomial g^(k-1) (1-g)^(N-k); no guard needed
            g, w = _gauss_legendre(sched.gamma(a), sched.gamma(b), cfg.quadrature_points)
            g, kk = g[:, None], ks[1:]
            out[1:] = (w[:, None] * g ** (kk - 1) * (1 - g) ** (n - kk)).sum(axis=0)
        return out

    # fixed count: exactly k tokens are masked while gamma(t) lies in ((k-1)/N, k/N]
    for k in range(1, n + 1):
        lo = max(a, sched.inverse((k - 1) / n))
        hi = min(b, sched.inverse(k / n))
        if hi <= lo:
            continue
        if cfg.weight == "constant":
            mass = hi - lo
        else:
            mass = mdm_weight_antiderivative(sched, hi, cfg.epsilon) - mdm_weight_antiderivative(sched, lo, cfg.epsilon)
        out[k] = mass / comb(n, k)
    return out


def _all_masks(n):
    return ((np.arange(2 ** n)[:, None] >> np.arange(n)[::-1]) & 1).astype(bool)


def _exact_batch(dataset: ToyDataset, cfg: LossConfig, cond):
    dataset.require_enumerable()
    n = dataset.num_positions
    masks = _all_masks(n)
    coef_k = mask_coefficients(cfg, n)
    s, m = len(dataset.probs), len(masks)
    x0 = np.repeat(dataset.states, m, axis=0)
    mask = np.tile(masks, (s, 1))
    xt = np.where(mask, MASK, x0)
    coef = (np.repeat(dataset.probs, m) * coef_k[mask.sum(axis=1)])[:, None] * mask
    if cond is None:
        cond = dataset.classes if dataset.classes is not None else np.full(s, UNCOND_MASK)
        cond = np.repeat(cond, m)
    else:
        cond = np.full(len(xt), cond)
    keep = coef.sum(axis=1) > 0
    return xt[keep], cond[keep], x0[keep], coef[keep]


def loss_exact(model, dataset: ToyDataset, cfg: LossConfig, cond=None) -> float:
    """Exact expected loss over the dataset.

    ``cond=None`` conditions each state on its own class (or the mask code
    for unlabeled data); otherwise every state is evaluated under ``cond``.
    """
    xt, c, x0, coef = _exact_batch(dataset, cfg, cond)
    probs = _checked_predict(model, xt, c)
    picked = np.take_along_axis(probs, x0[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        nll = -np.log(np.where(coef > 0, picked, 1.0))
    return float(np.sum(coef * nll))


def loss_exact_grad(model, dataset: ToyDataset, cfg: LossConfig, cond=None):
    if not is_learnable(model):
        raise TypeError(f"{type(model).__name__} has no parameters to differentiate")
    xt, c, x0, coef = _exact_batch(dataset, cfg, cond)
    return model.nll_grad(xt, c, x0, coef)


def maskgit_loss_exact(model, dataset: ToyDataset, cond=None) -> float:
    """Exact count-uniform loss: masked count ``l`` uniform on ``1..N``, weight ``N / l``.

    Enumerates position subsets directly, independent of ``loss_exact``.
    """
    dataset.require_enumerable()
    n = dataset.num_positions
    total = 0.0
    for state_idx, x0 in enumerate(dataset.states):
        if cond is None:
            c = dataset.classes[state_idx] if dataset.classes is not None else UNCOND_MASK
        else:
            c = cond
        for l in range(1, n + 1):
            subsets = list(itertools.combinations(range(n), l))
            xt = np.tile(x0, (len(subsets), 1))
            for row, subset in enumerate(subsets):
                xt[row, list(subset)] = MASK
            probs = _checked_predict(model, xt, np.full(len(xt), c))
            ce = 0.0
            for row, subset in enumerate(subsets):
                ce += sum(-np.log(probs[row, i, x0[i]]) for i in subset)
            total += dataset.probs[state_idx] * (1.0 / n) * (n / l) * ce / len(subsets)
    return float(total)
