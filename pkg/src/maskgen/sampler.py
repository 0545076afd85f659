"""Iterative unmasking samplers with classifier-free guidance and NFE accounting.

Generation starts fully masked and walks the uniform grid
``t_i = (T-i+1)/T -> s_i = (T-i)/T``.  Each step makes one conditional
model call, plus one unconditional call when guidance is active at
``s_i``.  Samples are processed in fixed-size chunks, each with its own
random stream derived from ``(seed, chunk index)``, so results do not
depend on the number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .head import GaussianMixture, HeadSampler, DpmSolver, head_nfe, sample_head
from .masking import MASK
from .models import UNCOND_FAKE, UNCOND_MASK, cond_array
from .schedule import MaskSchedule, ceil_count, discretize

UNMASK_RULES = ("stochastic", "topk", "one-at-a-time")
CFG_MODES = ("none", "standard", "mask")
CFG_SCHEDULES = ("constant", "linear")
CHUNK_SIZE = 4096
PROB_FLOOR = 1e-12


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CfgConfig:
    mode: str = "none"
    scale: float = 0.0
    schedule: str = "constant"
    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        if self.mode not in CFG_MODES:
            raise ValueError(f"cfg mode must be one of {CFG_MODES}")
        if self.schedule not in CFG_SCHEDULES:
            raise ValueError(f"cfg schedule must be one of {CFG_SCHEDULES}")
        if not 0.0 <= self.t_min <= self.t_max <= 1.0:
            raise ValueError("cfg interval must satisfy 0 <= t_min <= t_max <= 1")
        if self.scale < 0:
            raise ValueError("cfg scale must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "CfgConfig":
        return cls(**data)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "scale": self.scale, "schedule": self.schedule,
                "t_min": self.t_min, "t_max": self.t_max}


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 16
    schedule: MaskSchedule = field(default_factory=lambda: MaskSchedule("exp"))
    unmask_rule: str = "stochastic"
    cfg: CfgConfig = field(default_factory=CfgConfig)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.unmask_rule not in UNMASK_RULES:
            raise ValueError(f"unmask_rule must be one of {UNMASK_RULES}")

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        return cls(steps=int(data.get("steps", 16)),
                   schedule=MaskSchedule.from_config(data.get("schedule", "exp")),
                   unmask_rule=data.get("unmask_rule", "stochastic"),
                   cfg=CfgConfig.from_dict(data.get("cfg", {})),
                   seed=int(data.get("seed", 0)))

    def to_dict(self) -> dict:
        return {"steps": self.steps, "schedule": self.schedule.to_config(),
                "unmask_rule": self.unmask_rule, "cfg": self.cfg.to_dict(), "seed": self.seed}


@dataclass
class GenerationTrace:
    """Per-step record for a batch of trajectories.

    ``masked_before`` and ``revealed`` have shape ``(steps, n_samples)``;
    ``nfe`` counts backbone evaluations along one trajectory.
    """

    t: np.ndarray
    s: np.ndarray
    cfg_applied: np.ndarray
    masked_before: np.ndarray
    revealed: np.ndarray
    nfe: int
    head_nfe: int = 0

    @property
    def nfe_cumulative(self) -> np.ndarray:
        return np.cumsum(1 + self.cfg_applied.astype(int))

    def rows(self):
        """CSV rows, counts averaged over the batch."""
        cum = self.nfe_cumulative
        for i in range(len(self.t)):
            yield {"step": i + 1, "t": self.t[i], "s": self.s[i],
                   "masked_before": float(self.masked_before[i].mean()),
                   "revealed": float(self.revealed[i].mean()),
                   "cfg_applied": int(self.cfg_applied[i]), "nfe_cumulative": int(cum[i])}


def _sample_categorical(probs, rng):
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


def reverse_step(xt, probs, gamma_t: float, gamma_s: float, rng):
    """One step of the masked reverse process from ``t`` to ``s``.

    Visible tokens are kept; each masked token stays masked with
    probability ``gamma_s / gamma_t`` and is otherwise drawn from ``probs``.
    """
    xt = np.asarray(xt)
    if probs.shape[:-1] != xt.shape:
        raise SamplingError(f"prediction shape {probs.shape} does not cover positions {xt.shape}")
    if not gamma_t > 0 or gamma_s > gamma_t:
        raise ValueError(f"need 0 <= gamma_s <= gamma_t and gamma_t > 0, got {gamma_s}, {gamma_t}")
    reveal_p = (gamma_t - gamma_s) / gamma_t
    reveal = (xt == MASK) & (rng.random(xt.shape) < reveal_p)
    draws = _sample_categorical(probs, rng)
    return np.where(reveal, draws, xt)


def topk_unmask_step(xt, probs, target_masked: int, rng):
    """Reveal the most confident masked positions until ``target_masked`` remain.

    Confidence is the probability of the sampled candidate token; ties go
    to the lower position index.  With ``target_masked = ceil(N gamma_s)``
    this reveals ``ceil(N gamma_t) - ceil(N gamma_s)`` tokens per step.
    """
    xt = np.atleast_2d(np.asarray(xt))
    cand = _sample_categorical(probs, rng)
    conf = np.take_along_axis(probs, cand[..., None], axis=-1)[..., 0]
    masked = xt == MASK
    conf = np.where(masked, conf, -np.inf)
    order = np.argsort(-conf, axis=1, kind="stable")
    rank = np.argsort(order, axis=1, kind="stable")
    k = np.maximum(masked.sum(axis=1) - target_masked, 0)
    reveal = masked & (rank < k[:, None])
    return np.where(reveal, cand, xt)


def one_at_a_time_step(xt, probs, rng):
    """Reveal a single uniformly chosen masked position per row."""
    xt = np.atleast_2d(np.asarray(xt))
    masked = xt == MASK
    score = np.where(masked, rng.random(xt.shape), -1.0)
    pick = np.argmax(score, axis=1)
    draws = _sample_categorical(probs, rng)
    out = xt.copy()
    rows = np.flatnonzero(masked.any(axis=1))
    out[rows, pick[rows]] = draws[rows, pick[rows]]
    return out


def apply_cfg(pred_cond, pred_uncond, scale: float):
    """Guided distribution ``softmax(log p_u + (1 + scale) (log p_c - log p_u))``."""
    if scale == 0:
        return np.array(pred_cond, dtype=float, copy=True)
    lc = np.log(np.maximum(pred_cond, PROB_FLOOR))
    lu = np.log(np.maximum(pred_uncond, PROB_FLOOR))
    g = lu + (1.0 + scale) * (lc - lu)
    g -= g.max(axis=-1, keepdims=True)
    p = np.exp(g)
    return p / p.sum(axis=-1, keepdims=True)


def cfg_scale_at(cfg: CfgConfig, s_i: float, progress: float):
    """Whether guidance runs on a step ending at ``s_i`` and its effective scale.

    The interval filter is applied first; a linear schedule then scales by
    ``progress``, the fraction of steps already completed.
    """
    if cfg.mode == "none" or not cfg.t_min <= s_i <= cfg.t_max:
        return False, 0.0
    if cfg.schedule == "linear":
        return True, cfg.scale * progress
    return True, cfg.scale


def _grid(config: SamplerConfig, num_positions: int):
    steps = num_positions if config.unmask_rule == "one-at-a-time" else config.steps
    return discretize(steps, config.schedule)


def _predict(model, xt, cond, cfg_on, scale, uncond_code):
    probs = model.predict(xt, cond)
    if cfg_on:
        probs = apply_cfg(probs, model.predict(xt, np.full(len(xt), uncond_code)), scale)
    return probs


def _run_chunk(model, cond, config, n, rng, on_reveal=None):
    num_positions = model.num_positions
    grid = _grid(config, num_positions)
    T = len(grid)
    xt = np.full((n, num_positions), MASK, dtype=np.int64)
    masked_before = np.empty((T, n), dtype=np.int64)
    revealed = np.empty((T, n), dtype=np.int64)
    uncond_code = UNCOND_MASK if config.cfg.mode == "mask" else UNCOND_FAKE
    for i, step in enumerate(grid):
        progress = i / (T - 1) if T > 1 else 0.0
        cfg_on, scale = cfg_scale_at(config.cfg, step.s, progress)
        try:
            probs = _predict(model, xt, cond, cfg_on, scale, uncond_code)
        except Exception as exc:
            raise SamplingError(f"model failed at step {step.index}: {exc}") from exc
        before = xt == MASK
        if config.unmask_rule == "stochastic":
            new = reverse_step(xt, probs, step.gamma_t, step.gamma_s, rng)
        elif config.unmask_rule == "topk":
            new = topk_unmask_step(xt, probs, ceil_count(num_positions, step.gamma_s), rng)
        else:
            new = one_at_a_time_step(xt, probs, rng)
        if on_reveal is not None:
            on_reveal(i, before & (new != MASK), new, rng)
        masked_before[i] = before.sum(axis=1)
        revealed[i] = (before & (new != MASK)).sum(axis=1)
        xt = new
    return xt, masked_before, revealed


def _chunks(n_samples, chunk_size):
    return [(k, min(chunk_size, n_samples - start))
            for k, start in enumerate(range(0, n_samples, chunk_size))]


def generate(model, cond, config: SamplerConfig, n_samples: int, threads: int = 1,
             chunk_size: int = CHUNK_SIZE):
    """Draw ``n_samples`` fully unmasked sequences.

    ``cond`` is a single conditioning code or one per sample.  Returns
    ``(samples, trace)``.
    """
    conds = cond_array(cond, n_samples, getattr(model, "num_classes", 0))
    grid = _grid(config, model.num_positions)
    chunks = _chunks(n_samples, chunk_size)
    starts = np.cumsum([0] + [size for _, size in chunks])

    def work(item):
        k, size = item
        rng = np.random.default_rng([config.seed, k])
        return _run_chunk(model, conds[starts[k]:starts[k] + size], config, size, rng)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(work, chunks))
    samples = np.concatenate([p[0] for p in parts]) if parts else np.empty((0, model.num_positions), int)
    if np.any(samples == MASK):
        raise SamplingError("sampler finished with masked tokens")
    trace = _make_trace(config, grid, parts)
    return samples, trace


def _make_trace(config, grid, parts):
    T = len(grid)
    applied = np.array([cfg_scale_at(config.cfg, st.s, i / (T - 1) if T > 1 else 0.0)[0]
                        for i, st in enumerate(grid)])
    return GenerationTrace(
        t=np.array([st.t for st in grid]), s=np.array([st.s for st in grid]),
        cfg_applied=applied,
        masked_before=np.concatenate([p[1] for p in parts], axis=1) if parts else np.zeros((T, 0), int),
        revealed=np.concatenate([p[2] for p in parts], axis=1) if parts else np.zeros((T, 0), int),
        nfe=int(T + applied.sum()))


def generate_continuous(backbone, head_contexts: Sequence[GaussianMixture] | Callable,
                        config: SamplerConfig, n_samples: int, cond=None,
                        head_sampler: HeadSampler = DpmSolver(2, 10), threads: int = 1,
                        chunk_size: int = CHUNK_SIZE):
    """Masked generation whose revealed tokens carry continuous values.

    The backbone samples a discrete code per position exactly as in
    ``generate``; the code (and position) select the mixture the head
    samples from when the position is revealed.  ``head_contexts`` is a
    list indexed by code or a callable ``(code, position) -> mixture``.

    Returns ``(codes, values, trace)``; ``trace.head_nfe`` counts head
    denoiser evaluations along one trajectory, separately from ``trace.nfe``.
    """
    if callable(head_contexts):
        context = head_contexts
    else:
        mixtures = list(head_contexts)
        context = lambda code, pos: mixtures[code]  # noqa: E731
    dim = context(0, 0).dim
    conds = cond_array(cond, n_samples, getattr(backbone, "num_classes", 0))
    grid = _grid(config, backbone.num_positions)
    chunks = _chunks(n_samples, chunk_size)
    starts = np.cumsum([0] + [size for _, size in chunks])
    per_call = head_nfe(head_sampler)

    def work(item):
        k, size = item
        rng = np.random.default_rng([config.seed, k])
        values = np.full((size, backbone.num_positions, dim), np.nan)
        head_steps = np.zeros(len(grid), dtype=bool)

        def on_reveal(i, newly, codes, rng):
            rows, cols = np.nonzero(newly)
            if len(rows):
                head_steps[i] = True
            keys = sorted({(int(codes[r, c]), int(c)) for r, c in zip(rows, cols)})
            for code, pos in keys:
                sel = (codes[rows, cols] == code) & (cols == pos)
                values[rows[sel], cols[sel]] = sample_head(context(code, pos), head_sampler,
                                                           int(sel.sum()), rng)

        codes, mb, rv = _run_chunk(backbone, conds[starts[k]:starts[k] + size], config, size, rng, on_reveal)
        return codes, mb, rv, values, head_steps

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(work, chunks))
    codes = np.concatenate([p[0] for p in parts])
    values = np.concatenate([p[3] for p in parts])
    trace = _make_trace(config, grid, [p[:3] for p in parts])
    # one batched head call per step that revealed anything in the batch
    trace.head_nfe = int(np.any([p[4] for p in parts], axis=0).sum() * per_call)
    return codes, values, trace
