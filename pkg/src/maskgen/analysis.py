"""Experiment harnesses and distribution metrics for toy-scale evaluation."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .head import GaussianMixture
from .loss import LossConfig, loss_exact, maskgit_loss_exact
from .masking import MASK, MAX_ENUMERABLE, EnumerationError, ToyDataset, encode
from .sampler import CfgConfig, SamplerConfig, generate
from .schedule import MaskSchedule, TimeWindow, discretize

SIM_CHUNK = 2500


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, float, np.number)):
        return fmt(v)
    return v


@dataclass
class StepCountProfile:
    schedule: MaskSchedule
    num_tokens: int
    steps: int
    trials: int
    t: np.ndarray
    s: np.ndarray
    counts: np.ndarray  # (trials, steps)

    @property
    def mean(self) -> np.ndarray:
        return self.counts.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.counts.std(axis=0, ddof=1) if self.trials > 1 else np.zeros(self.steps)

    @property
    def stderr(self) -> np.ndarray:
        return self.std / np.sqrt(self.trials)

    def expected(self) -> np.ndarray:
        """Analytic reveal expectation ``N (gamma_t - gamma_s)`` per step."""
        g = self.schedule.gamma
        return self.num_tokens * (np.asarray(g(self.t)) - np.asarray(g(self.s)))

    def write_csv(self, path):
        write_csv(path, ["step", "t", "s", "mean", "std"],
                  ((i + 1, self.t[i], self.s[i], self.mean[i], self.std[i]) for i in range(self.steps)))


def simulate_unmask_counts(schedule: MaskSchedule, num_tokens: int, steps: int, trials: int,
                           seed: int = 0, threads: int = 1) -> StepCountProfile:
    """Monte-Carlo reveal counts of the stochastic rule with no model in the loop.

    Every token starts masked; at step ``i`` each still-masked token is
    revealed with probability ``(gamma_t - gamma_s) / gamma_t``.  The number
    revealed is therefore binomial in the number still masked.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    grid = discretize(steps, schedule)
    probs = np.array([(st.gamma_t - st.gamma_s) / st.gamma_t for st in grid])

    def work(item):
        k, size = item
        rng = np.random.default_rng([seed, k])
        masked = np.full(size, num_tokens)
        out = np.empty((size, steps), dtype=np.int64)
        for i, p in enumerate(probs):
            out[:, i] = rng.binomial(masked, p)
            masked -= out[:, i]
        return out

    chunks = [(k, min(SIM_CHUNK, trials - start)) for k, start in enumerate(range(0, trials, SIM_CHUNK))]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        counts = np.concatenate(list(pool.map(work, chunks)))
    return StepCountProfile(schedule, num_tokens, steps, trials,
                            np.array([st.t for st in grid]), np.array([st.s for st in grid]), counts)


def tv_distance(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"distributions live on different supports: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def empirical_joint(samples, num_positions: int, vocab_size: int) -> np.ndarray:
    """Normalised counts over the ``V**N`` sequence space."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    if vocab_size ** num_positions > MAX_ENUMERABLE:
        raise EnumerationError(f"V**N = {vocab_size ** num_positions} exceeds {MAX_ENUMERABLE}")
    if np.any(samples == MASK):
        raise ValueError("samples must be fully unmasked")
    if samples.shape[1] != num_positions:
        raise ValueError("sample length does not match the dataset")
    counts = np.bincount(encode(samples, vocab_size), minlength=vocab_size ** num_positions)
    return counts / counts.sum()


def tv_stderr(p_hat, n: int, q, rng: np.random.Generator, reps: int = 200) -> float:
    """Parametric-bootstrap standard error of ``tv_distance(p_hat, q)`` from ``n`` samples."""
    boots = rng.multinomial(n, p_hat, size=reps) / n
    return float(np.std(0.5 * np.abs(boots - q).sum(axis=1), ddof=1))


def w1_empirical(samples, target: GaussianMixture, resolution: int = 10000) -> float:
    """1-D Wasserstein-1 distance by midpoint integration of the quantile difference."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise NotImplementedError("W1 is only implemented for one-dimensional tokens")
        x = x[:, 0]
    if target.dim != 1:
        raise NotImplementedError("W1 is only implemented for one-dimensional tokens")
    u = (np.arange(resolution) + 0.5) / resolution
    emp = np.quantile(np.sort(x), u, method="inverted_cdf")
    return float(np.mean(np.abs(emp - target.ppf(u))))


@dataclass
class SweepResult:
    rows: list  # (t_min, t_max, metric, nfe)

    def write_csv(self, path):
        write_csv(path, ["t_min", "t_max", "metric", "nfe"], self.rows)


def interval_sweep(model, dataset: ToyDataset, base: SamplerConfig, t_mins, t_maxs,
                   n_samples: int, threads: int = 1) -> SweepResult:
    """Guidance-interval grid: macro-averaged per-class TV to the data and NFE per cell."""
    classes = range(dataset.num_classes) if dataset.num_classes else [None]
    rows = []
    for lo in t_mins:
        for hi in t_maxs:
            if not lo < hi:
                continue
            cfg = replace(base, cfg=replace(base.cfg, t_min=float(lo), t_max=float(hi)))
            tvs, nfe = [], None
            for c in classes:
                samples, trace = generate(model, c, cfg, n_samples, threads=threads)
                emp = empirical_joint(samples, dataset.num_positions, dataset.vocab_size)
                tvs.append(tv_distance(emp, dataset.joint(c)))
                nfe = trace.nfe
            rows.append((float(lo), float(hi), float(np.mean(tvs)), nfe))
    return SweepResult(rows)


def equivalence_report(models: dict, datasets: dict) -> list:
    """Rows ``(model_id, maskgit_loss, mdm_loss, rel_gap)`` comparing the two exact losses.

    ``models`` maps ids to ``(model, dataset_id)``; the time-integral loss uses the
    linear schedule, ``gamma'/gamma`` weight and independent masking on [0, 1].
    """
    cfg = LossConfig(MaskSchedule("linear"), "mdm", TimeWindow(0.0, 1.0), "independent",
                     quadrature_points=64)
    rows = []
    for model_id, (model, data_id) in models.items():
        data = datasets[data_id]
        a = maskgit_loss_exact(model, data)
        b = loss_exact(model, data, cfg)
        gap = abs(a - b) / max(abs(b), 1e-300) if b != 0 else abs(a - b)
        rows.append((model_id, a, b, gap))
    return rows


def write_equivalence_csv(path, rows):
    write_csv(path, ["model_id", "maskgit_loss", "mdm_loss", "rel_gap"], rows)
