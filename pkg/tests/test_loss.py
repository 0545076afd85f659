from math import comb, log

import numpy as np
import pytest
from hypothesis import given, strategies as st

from maskgen.loss import (ContractError, LossConfig, loss_exact, loss_exact_grad, loss_grad, loss_mc,
                          loss_mc_terms, mask_coefficients, maskgit_loss_exact)
from maskgen.masking import EnumerationError, ToyDataset, random_dataset
from maskgen.models import ConstantModel, LearnedCatModel, OracleModel, TabularModel
from maskgen.schedule import SCHEDULE_KINDS, MaskSchedule, TimeWindow

LINEAR_MDM = LossConfig(MaskSchedule("linear"), "mdm", TimeWindow(0.0, 1.0), quadrature_points=256)


def _single(n=1, v=2, token=0):
    return ToyDataset(np.full((1, n), token), np.array([1.0]), v)


def _mc_dataset(model, data, cfg, n, seed):
    """Dataset-level MC estimate and its standard error."""
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, data.probs)
    terms = []
    for x0, k in zip(data.states, counts):
        if k:
            terms.append(loss_mc_terms(model, x0, None, LossConfig(**{**cfg.__dict__, "mc_samples": int(k)}), rng))
    terms = np.concatenate(terms)
    return terms.mean(), terms.std(ddof=1) / np.sqrt(n)


def test_perfect_model_gives_zero(rng):
    data = _single(3, 2, 1)
    model = OracleModel(data)
    for cfg in (LINEAR_MDM, LossConfig(MaskSchedule("exp"), "constant", TimeWindow(0.2, 1.0), "fixed")):
        assert loss_exact(model, data, cfg) == 0.0
        assert loss_mc(model, data.states[0], None, LossConfig(**{**cfg.__dict__, "mc_samples": 50}), rng) == 0.0


@pytest.mark.parametrize("p", [0.3, 0.7])
def test_single_token_closed_forms(p, rng):
    data, model = _single(), ConstantModel(np.array([p, 1 - p]), 1)
    eps = 0.01
    mdm = LossConfig(MaskSchedule("linear"), "mdm", TimeWindow(eps, 1.0), mc_samples=100_000)
    const = LossConfig(MaskSchedule("linear"), "constant", TimeWindow(0.0, 1.0), mc_samples=100_000)
    # integral of gamma' (-log p) over [eps, 1], and of t (-log p) over [0, 1]
    assert loss_exact(model, data, mdm) == pytest.approx((1 - eps) * -log(p), abs=1e-9)
    assert loss_exact(model, data, const) == pytest.approx(0.5 * -log(p), abs=1e-9)
    for cfg, target in ((mdm, (1 - eps) * -log(p)), (const, 0.5 * -log(p))):
        terms = loss_mc_terms(model, data.states[0], None, cfg, rng)
        assert abs(terms.mean() - target) <= 4 * terms.std(ddof=1) / np.sqrt(len(terms))


@pytest.mark.parametrize("cfg", [
    LossConfig(MaskSchedule("exp"), "mdm", TimeWindow(0.05, 1.0)),
    LossConfig(MaskSchedule("cosine"), "constant", TimeWindow(0.0, 1.0)),
    LossConfig(MaskSchedule("linear"), "mdm", TimeWindow(0.05, 0.8), "fixed"),
    LossConfig(MaskSchedule("log-exp"), "constant", TimeWindow(0.2, 1.0), "fixed"),
])
def test_exact_matches_mc(cfg):
    data = random_dataset(3, 2, seed=7)
    model = TabularModel(3, 2, rng=np.random.default_rng(1))
    mean, se = _mc_dataset(model, data, cfg, 100_000, seed=3)
    assert abs(mean - loss_exact(model, data, cfg)) <= 4 * se


def test_mc_is_deterministic():
    data = random_dataset(3, 2, seed=7)
    model = TabularModel(3, 2, rng=np.random.default_rng(1))
    cfg = LossConfig(MaskSchedule("exp"), "mdm", TimeWindow(0.1, 1.0), mc_samples=20)
    a = loss_mc(model, data.states[0], None, cfg, np.random.default_rng(9))
    assert a == loss_mc(model, data.states[0], None, cfg, np.random.default_rng(9))


def test_count_uniform_single_token():
    data = _single()
    assert maskgit_loss_exact(ConstantModel(np.array([0.3, 0.7]), 1), data) == pytest.approx(-log(0.3), abs=1e-12)


def test_count_uniform_pair_by_hand(pair):
    # l = 1: weight 2, conditional entropy of one token given the other (0.8 / 0.2 split);
    # l = 2: weight 1, two uniform marginals. Average over l in {1, 2}.
    h = -(0.8 * log(0.8) + 0.2 * log(0.2))
    expected = 0.5 * (2 * h + 2 * log(2))
    assert maskgit_loss_exact(OracleModel(pair), pair) == pytest.approx(expected, abs=1e-12)


@given(st.integers(1, 4), st.integers(2, 3), st.integers(0, 10_000))
def test_equivalence_theorem(n, v, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(n, v, seed=seed)
    model = TabularModel(n, v, rng=rng)
    a, b = maskgit_loss_exact(model, data), loss_exact(model, data, LINEAR_MDM)
    assert abs(a - b) / b <= 1e-6


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_mask_coefficients_closed_forms(n):
    """Linear schedule with the 1/t weight.

    Independent masking gives the Beta integral 1/(k C(N,k)); fixed-count
    masking integrates 1/t over ((k-1)/N, k/N], i.e. log(k/(k-1)) / C(N,k)
    for k >= 2, and diverges (guard-limited) for k = 1.  The two masking
    choices therefore do not give equal losses under this weight.
    """
    indep = mask_coefficients(LINEAR_MDM, n)
    fixed = mask_coefficients(LossConfig(MaskSchedule("linear"), "mdm", TimeWindow(0, 1), "fixed"), n)
    for k in range(1, n + 1):
        assert indep[k] == pytest.approx(1 / (k * comb(n, k)), rel=1e-12)
    for k in range(2, n + 1):
        assert fixed[k] == pytest.approx(log(k / (k - 1)) / comb(n, k), rel=1e-12)
    assert fixed[1] * comb(n, 1) == pytest.approx(1 + log(1 / n / 1e-8), rel=1e-12)


@given(st.integers(1, 3), st.integers(2, 3), st.sampled_from(SCHEDULE_KINDS),
       st.sampled_from(["constant", "mdm"]), st.sampled_from(["independent", "fixed"]), st.integers(0, 999))
def test_nonnegative_and_window_additive(n, v, kind, w, masking, seed):
    data = random_dataset(n, v, seed=seed)
    model = TabularModel(n, v, rng=np.random.default_rng(seed))
    sched = MaskSchedule(kind)

    def loss(a, b):
        return loss_exact(model, data, LossConfig(sched, w, TimeWindow(a, b), masking, quadrature_points=128))

    whole = loss(0.1, 1.0)
    assert whole >= 0
    assert loss(0.1, 0.45) + loss(0.45, 1.0) == pytest.approx(whole, rel=1e-9, abs=1e-12)


def test_window_additivity_from_zero():
    data = random_dataset(3, 3, seed=2)
    model = TabularModel(3, 3, rng=np.random.default_rng(2))
    for kind in SCHEDULE_KINDS:
        for masking in ("independent", "fixed"):
            cfgs = [LossConfig(MaskSchedule(kind), "mdm", TimeWindow(a, b), masking) for a, b in
                    [(0, 0.3), (0.3, 1), (0, 1)]]
            lo, hi, whole = (loss_exact(model, data, c) for c in cfgs)
            assert lo + hi == pytest.approx(whole, rel=1e-9)


def test_non_normalised_model_is_rejected(rng):
    class Broken:
        num_positions, vocab_size, num_classes = 2, 2, 0

        def predict(self, xt, cond=None):
            return np.full(np.shape(xt) + (2,), 0.7)

    data = random_dataset(2, 2, seed=0)
    with pytest.raises(ContractError):
        loss_exact(Broken(), data, LINEAR_MDM)
    with pytest.raises(ContractError):
        loss_mc(Broken(), data.states[0], None, LossConfig(MaskSchedule("linear"), "constant",
                                                           TimeWindow(0.5, 1.0), mc_samples=10), rng)


def test_enumeration_refused():
    big = ToyDataset(np.zeros((1, 21), dtype=int), np.array([1.0]), 2)
    model = ConstantModel(np.array([0.5, 0.5]), 21)
    with pytest.raises(EnumerationError):
        loss_exact(model, big, LINEAR_MDM)
    with pytest.raises(EnumerationError):
        maskgit_loss_exact(model, big)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        LossConfig(mc_samples=0)
    with pytest.raises(ValueError):
        LossConfig(quadrature_points=8)
    with pytest.raises(ValueError):
        LossConfig(masking="bernoulli")
    cfg = LossConfig.from_dict({"schedule": {"name": "exp", "rate": 3}, "weight": "constant",
                                "t_min": 0.2, "t_max": 0.9, "masking": "fixed", "mc_samples": 4,
                                "quadrature_points": 32})
    assert LossConfig.from_dict(cfg.to_dict()) == cfg


def test_grad_of_parameter_free_model(rng):
    model = ConstantModel(np.array([0.5, 0.5]), 2)
    value, grad = loss_grad(model, [(np.array([0, 1]), None)], LossConfig(mc_samples=4), rng)
    assert grad.shape == (0,) and value >= 0


def test_grad_requires_learnable(rng, pair):
    with pytest.raises(TypeError):
        loss_grad(OracleModel(pair), [(np.array([0, 1]), None)], LossConfig(), rng)


def _fd_check(model, fn, h=1e-3, coords=20, seed=0):
    value, grad = fn(model.params)
    idx = np.random.default_rng(seed).choice(len(model.params), size=coords, replace=False)
    fd = []
    for i in idx:
        up, down = model.params.copy(), model.params.copy()
        up[i] += h
        down[i] -= h
        fd.append((fn(up)[0] - fn(down)[0]) / (2 * h))
    fd = np.array(fd)
    return np.max(np.abs(grad[idx] - fd)) / max(np.max(np.abs(fd)), 1e-12)


def test_mc_grad_matches_finite_differences():
    data = random_dataset(3, 3, num_classes=2, seed=5)
    model = LearnedCatModel.init(3, 3, 2, hidden=8, rng=np.random.default_rng(0))
    tokens, classes = data.sample(16, np.random.default_rng(1))
    batch = list(zip(tokens, classes))
    cfg = LossConfig(MaskSchedule("exp"), "mdm", TimeWindow(0.1, 1.0), mc_samples=3)

    def fn(params):
        trial = model.copy()
        trial.params = params
        return loss_grad(trial, batch, cfg, np.random.default_rng(42))

    assert _fd_check(model, fn) <= 1e-4


def test_exact_grad_matches_finite_differences(pair):
    model = LearnedCatModel.init(2, 2, 0, hidden=6, rng=np.random.default_rng(3))
    cfg = LossConfig(MaskSchedule("cosine"), "constant", TimeWindow(0.0, 1.0))

    def fn(params):
        trial = model.copy()
        trial.params = params
        return loss_exact_grad(trial, pair, cfg)

    value, _ = fn(model.params)
    assert value == pytest.approx(loss_exact(model, pair, cfg), rel=1e-12)
    assert _fd_check(model, fn) <= 1e-4


def test_sgd_step_decreases_exact_loss(pair):
    model = LearnedCatModel.init(2, 2, 0, hidden=16, rng=np.random.default_rng(4))
    cfg = LossConfig(MaskSchedule("exp"), "constant", TimeWindow(0.2, 1.0), mc_samples=8)
    tokens, _ = pair.sample(256, np.random.default_rng(5))
    _, grad = loss_grad(model, [(x, None) for x in tokens], cfg, np.random.default_rng(6))
    before = loss_exact(model, pair, cfg)
    model.params = model.params - 1e-2 * grad
    assert loss_exact(model, pair, cfg) < before
