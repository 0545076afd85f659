"""Conditional token models ``p(x0^i | x_t, cond)``.

Every model exposes ``num_positions``, ``vocab_size`` and
``predict(xt, cond)`` returning per-position categorical probabilities of
shape ``(B, N, V)`` (or ``(N, V)`` for a single sequence).  Predictions
cover all positions; rows at unmasked positions are ignored by callers.

Conditioning is an integer per sequence: a class id ``0..C-1``, or one of
the unconditional encodings ``UNCOND_FAKE`` / ``UNCOND_MASK``.

Learnable models additionally expose a flat ``params`` vector and
``nll_grad(xt, cond, x0, coef)`` returning the weighted negative
log-likelihood ``sum coef[b, i] * -log p(x0[b, i] | xt[b], cond[b])`` and
its gradient.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import MASK, ToyDataset

log = logging.getLogger(__name__)

UNCOND_FAKE = -1
UNCOND_MASK = -2


class InconsistentContextError(ValueError):
    """A context has zero probability under the dataset."""


def cond_array(cond, batch: int, num_classes: int) -> np.ndarray:
    if cond is None:
        cond = UNCOND_MASK
    c = np.broadcast_to(np.asarray(cond, dtype=np.int64), (batch,))
    bad = (c >= num_classes) | ((c < 0) & (c != UNCOND_FAKE) & (c != UNCOND_MASK))
    if np.any(bad):
        raise ValueError(f"conditioning must be a class in 0..{num_classes - 1} or an unconditional code")
    return c


def _batched(xt):
    xt = np.asarray(xt, dtype=np.int64)
    return (xt[None], True) if xt.ndim == 1 else (xt, False)


def is_learnable(model) -> bool:
    return hasattr(model, "nll_grad") and hasattr(model, "params")


class OracleModel:
    """Exact Bayes posterior of a ``ToyDataset``.

    Both unconditional encodings marginalise over classes.  Identical
    contexts in a batch are solved once.
    """

    def __init__(self, dataset: ToyDataset):
        dataset.require_enumerable()
        self.dataset = dataset
        self.num_positions = dataset.num_positions
        self.vocab_size = dataset.vocab_size
        self.num_classes = dataset.num_classes
        self._onehot = np.eye(self.vocab_size)[dataset.states]  # (S, N, V)
        self._classes = dataset.classes if dataset.classes is not None else np.zeros(len(dataset.probs), int)

    def predict(self, xt, cond=None) -> np.ndarray:
        xt, single = _batched(xt)
        c = cond_array(cond, len(xt), self.num_classes)
        if self.num_classes == 0:
            c = np.full(len(xt), UNCOND_MASK)
        key = np.concatenate([xt, c[:, None]], axis=1)
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        ctx, cls = uniq[:, :-1], uniq[:, -1]

        states = self.dataset.states
        agree = np.all((ctx[:, None, :] == MASK) | (ctx[:, None, :] == states[None]), axis=2)
        w = agree * self.dataset.probs[None]
        w = np.where((cls[:, None] < 0) | (self._classes[None] == cls[:, None]), w, 0.0)
        total = w.sum(axis=1)
        if np.any(total <= 0):
            bad = ctx[np.argmax(total <= 0)]
            raise InconsistentContextError(f"context {bad.tolist()} has zero probability under the dataset")
        post = np.einsum("us,snv->unv", w / total[:, None], self._onehot)
        out = post[inverse]
        return out[0] if single else out


class ConstantModel:
    """Context-free model predicting the same distribution everywhere.

    It has no parameters, so it is trivially learnable with an empty gradient.
    """

    def __init__(self, probs, num_positions: int | None = None):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim == 1:
            probs = np.tile(probs, (num_positions or 1, 1))
        self.table = probs
        self.num_positions, self.vocab_size = probs.shape
        self.params = np.zeros(0)

    def predict(self, xt, cond=None):
        xt, single = _batched(xt)
        out = np.broadcast_to(self.table, (len(xt),) + self.table.shape).copy()
        return out[0] if single else out

    def nll_grad(self, xt, cond, x0, coef):
        probs = self.predict(xt, cond)
        picked = np.take_along_axis(probs, np.asarray(x0)[..., None], axis=-1)[..., 0]
        return float(np.sum(coef * -np.log(picked))), np.zeros(0)


class TabularModel:
    """Random lookup-table model: an independent categorical for every (context, class, position)."""

    def __init__(self, num_positions: int, vocab_size: int, num_classes: int = 0,
                 rng: np.random.Generator | None = None, concentration: float = 1.0):
        rng = rng or np.random.default_rng()
        self.num_positions, self.vocab_size, self.num_classes = num_positions, vocab_size, num_classes
        n_ctx = (vocab_size + 1) ** num_positions * (num_classes + 2)
        self.table = rng.dirichlet(np.full(vocab_size, concentration), size=(n_ctx, num_positions))

    def _index(self, xt, c):
        base = self.vocab_size + 1
        place = base ** np.arange(self.num_positions - 1, -1, -1)
        slot = np.where(c >= 0, c, self.num_classes + (c == UNCOND_MASK))
        return (xt + 1) @ place * (self.num_classes + 2) + slot

    def predict(self, xt, cond=None):
        xt, single = _batched(xt)
        c = cond_array(cond, len(xt), self.num_classes)
        out = self.table[self._index(xt, c)]
        return out[0] if single else out


@dataclass
class LearnedCatModel:
    """One-hidden-layer tanh network emitting per-position ``V``-way logits.

    Input features are a one-hot of the conditioning slot (``C`` classes,
    then a fake slot, then a mask slot) followed by, for every position, a
    one-hot over ``V`` tokens plus a masked indicator.
    """

    num_positions: int
    vocab_size: int
    num_classes: int = 0
    hidden: int = 32
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.params is None:
            self.params = np.zeros(self.num_params)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {self.params.shape}")

    @classmethod
    def init(cls, num_positions, vocab_size, num_classes=0, hidden=32, rng=None, scale=0.5):
        rng = rng or np.random.default_rng()
        model = cls(num_positions, vocab_size, num_classes, hidden)
        model.params = rng.normal(0.0, scale, size=model.num_params)
        return model

    @property
    def num_features(self) -> int:
        return self.num_classes + 2 + self.num_positions * (self.vocab_size + 1)

    @property
    def num_outputs(self) -> int:
        return self.num_positions * self.vocab_size

    @property
    def num_params(self) -> int:
        return self.hidden * (self.num_features + 1) + self.num_outputs * (self.hidden + 1)

    def _unpack(self):
        h, f, o = self.hidden, self.num_features, self.num_outputs
        p = self.params
        w1 = p[:h * f].reshape(h, f)
        b1 = p[h * f:h * f + h]
        off = h * f + h
        w2 = p[off:off + o * h].reshape(o, h)
        b2 = p[off + o * h:]
        return w1, b1, w2, b2

    def features(self, xt, cond) -> np.ndarray:
        xt = np.asarray(xt, dtype=np.int64)
        c = cond_array(cond, len(xt), self.num_classes)
        feats = np.zeros((len(xt), self.num_features))
        slot = np.where(c >= 0, c, self.num_classes + (c == UNCOND_MASK))
        feats[np.arange(len(xt)), slot] = 1.0
        tok = np.where(xt == MASK, self.vocab_size, xt)
        cols = self.num_classes + 2 + np.arange(self.num_positions) * (self.vocab_size + 1) + tok
        np.put_along_axis(feats, cols, 1.0, axis=1)
        return feats

    def _forward(self, xt, cond):
        w1, b1, w2, b2 = self._unpack()
        feats = self.features(xt, cond)
        h = np.tanh(feats @ w1.T + b1)
        logits = (h @ w2.T + b2).reshape(len(xt), self.num_positions, self.vocab_size)
        logits = logits - logits.max(axis=-1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        return feats, h, logp

    def predict(self, xt, cond=None):
        xt, single = _batched(xt)
        out = np.exp(self._forward(xt, cond)[2])
        return out[0] if single else out

    def nll_grad(self, xt, cond, x0, coef):
        xt = np.asarray(xt, dtype=np.int64)
        x0 = np.asarray(x0, dtype=np.int64)
        coef = np.asarray(coef, dtype=float)
        feats, h, logp = self._forward(xt, cond)
        picked = np.take_along_axis(logp, x0[..., None], axis=-1)[..., 0]
        value = float(np.sum(coef * -picked))

        _, _, w2, _ = self._unpack()
        dlogits = np.exp(logp)
        np.put_along_axis(dlogits, x0[..., None], np.take_along_axis(dlogits, x0[..., None], -1) - 1.0, -1)
        dlogits = (dlogits * coef[..., None]).reshape(len(xt), -1)
        dw2 = dlogits.T @ h
        db2 = dlogits.sum(axis=0)
        dpre = (dlogits @ w2) * (1.0 - h ** 2)
        dw1 = dpre.T @ feats
        db1 = dpre.sum(axis=0)
        return value, np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])

    def copy(self) -> "LearnedCatModel":
        return LearnedCatModel(self.num_positions, self.vocab_size, self.num_classes,
                               self.hidden, self.params.copy())

    def to_dict(self) -> dict:
        return {"params": self.params.tolist(),
                "meta": {"N": self.num_positions, "V": self.vocab_size,
                         "C": self.num_classes, "hidden": self.hidden}}

    @classmethod
    def from_dict(cls, data) -> "LearnedCatModel":
        meta = data["meta"]
        return cls(int(meta["N"]), int(meta["V"]), int(meta["C"]), int(meta["hidden"]),
                   np.asarray(data["params"], dtype=float))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "LearnedCatModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# Training ------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    step_size: float = 0.05
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    uncond_prob: float = 0.1
    uncond: str = "mask"  # which encoding replaces the class: "mask" or "fake"
    gradient: str = "mc"  # "mc" (sampled batches) or "exact" (full enumeration)
    decay: float = 0.0  # step size is step_size / (1 + decay * step)

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        return cls(**data)


@dataclass
class TrainResult:
    model: LearnedCatModel
    losses: np.ndarray
    initial_exact: float
    final_exact: float


def train_model(model: LearnedCatModel, dataset: ToyDataset, loss_cfg, opt: OptimizerConfig) -> TrainResult:
    """Fit ``model`` with Adam on the unified loss; the input model is not modified.

    With classes, each sampled label is replaced by the unconditional
    encoding with probability ``opt.uncond_prob``.
    """
    from .loss import loss_exact, loss_exact_grad, loss_grad

    if not is_learnable(model):
        raise TypeError(f"{type(model).__name__} is not learnable")
    model = model.copy()
    rng = np.random.default_rng(opt.seed)
    uncode = UNCOND_MASK if opt.uncond == "mask" else UNCOND_FAKE
    m = np.zeros_like(model.params)
    v = np.zeros_like(model.params)
    b1, b2, tiny = 0.9, 0.999, 1e-8
    losses = np.empty(opt.steps)
    initial = loss_exact(model, dataset, loss_cfg)

    for step in range(opt.steps):
        if opt.gradient == "exact":
            value, grad = loss_exact_grad(model, dataset, loss_cfg)
        else:
            x0, cls = dataset.sample(opt.batch_size, rng)
            if cls is None:
                cls = np.full(opt.batch_size, UNCOND_MASK)
            else:
                cls = np.where(rng.random(opt.batch_size) < opt.uncond_prob, uncode, cls)
            value, grad = loss_grad(model, list(zip(x0, cls)), loss_cfg, rng)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"non-finite loss or gradient at step {step} (loss={value})")
        losses[step] = value
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad ** 2
        lr = opt.step_size / (1.0 + opt.decay * step)
        mhat = m / (1 - b1 ** (step + 1))
        vhat = v / (1 - b2 ** (step + 1))
        model.params = model.params - lr * mhat / (np.sqrt(vhat) + tiny)
        if not np.all(np.isfinite(model.params)):
            raise TrainingDiverged(f"parameters became non-finite at step {step}")

    final = loss_exact(model, dataset, loss_cfg) if opt.steps else initial
    log.info("trained %d steps: exact loss %.6f -> %.6f", opt.steps, initial, final)
    return TrainResult(model, losses, initial, final)
