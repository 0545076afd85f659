"""Token sequences, enumerable toy datasets and forward masking.

Token sequences are integer numpy arrays of shape ``(N,)`` or ``(B, N)``.
Masked entries hold the sentinel ``MASK`` (-1), which lies outside the
vocabulary ``0..V-1`` so categorical predictions stay exactly ``V``-way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .schedule import ceil_count

MASK = -1
MAX_ENUMERABLE = 2 ** 20


class EnumerationError(ValueError):
    """The state space is too large for an exact oracle."""


def check_tokens(x, vocab_size: int, allow_mask: bool = True) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (1, 2) or x.shape[-1] < 1:
        raise ValueError(f"token array must have shape (N,) or (B, N) with N >= 1, got {x.shape}")
    if not np.issubdtype(x.dtype, np.integer):
        raise ValueError("token arrays must be integer typed")
    if np.any(x >= vocab_size) or np.any(x < MASK):
        raise ValueError(f"token ids must be in 0..{vocab_size - 1} or MASK")
    if not allow_mask and np.any(x == MASK):
        raise ValueError("sequence is already masked")
    return x


def masked_positions(x) -> np.ndarray:
    """Ascending indices of masked entries of a single sequence."""
    return np.flatnonzero(np.asarray(x) == MASK)


def mask_independent(x0, gamma_t, rng: np.random.Generator) -> np.ndarray:
    """Mask each position independently with probability ``gamma_t``.

    ``gamma_t`` may be an array broadcastable against ``x0`` (one rate per row).
    """
    x0 = np.asarray(x0)
    if np.any(x0 == MASK):
        raise ValueError("x0 must be fully unmasked")
    if not np.all((np.asarray(gamma_t) >= 0.0) & (np.asarray(gamma_t) <= 1.0)):
        raise ValueError(f"gamma_t must lie in [0, 1], got {gamma_t}")
    hit = rng.random(x0.shape) < gamma_t
    return np.where(hit, MASK, x0)


def mask_fixed_count(x0, gamma_t: float, rng: np.random.Generator) -> np.ndarray:
    """Mask exactly ``ceil(N * gamma_t)`` uniformly chosen positions per row."""
    x0 = np.asarray(x0)
    if np.any(x0 == MASK):
        raise ValueError("x0 must be fully unmasked")
    if not 0.0 <= gamma_t <= 1.0:
        raise ValueError(f"gamma_t must lie in [0, 1], got {gamma_t}")
    k = ceil_count(x0.shape[-1], gamma_t)
    ranks = np.argsort(np.argsort(rng.random(x0.shape), axis=-1), axis=-1)
    return np.where(ranks < k, MASK, x0)


def encode(tokens, vocab_size: int) -> np.ndarray:
    """Index of each fully unmasked sequence in the ``V**N`` state space."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    place = vocab_size ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return tokens @ place


def decode(index, num_positions: int, vocab_size: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    digits = []
    for _ in range(num_positions):
        digits.append(index % vocab_size)
        index = index // vocab_size
    return np.stack(digits[::-1], axis=-1)


def all_sequences(num_positions: int, vocab_size: int) -> np.ndarray:
    return decode(np.arange(vocab_size ** num_positions), num_positions, vocab_size)


@dataclass
class ToyDataset:
    """Fully enumerated distribution over token sequences.

    ``states[k]`` has probability ``probs[k]``.  When ``classes`` is given
    the pair ``(states[k], classes[k])`` is a point of the joint over
    sequences and labels, so a sequence may appear once per class.
    """

    states: np.ndarray
    probs: np.ndarray
    vocab_size: int
    num_classes: int = 0
    classes: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.int64))
        self.probs = np.asarray(self.probs, dtype=float)
        check_tokens(self.states, self.vocab_size, allow_mask=False)
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if self.probs.shape != (len(self.states),):
            raise ValueError("one probability per state required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities must be non-negative and sum to 1, got sum {self.probs.sum()!r}")
        if self.num_classes > 0:
            if self.classes is None:
                raise ValueError("class labels required when num_classes > 0")
            self.classes = np.asarray(self.classes, dtype=np.int64)
            if self.classes.shape != self.probs.shape:
                raise ValueError("one class label per state required")
            if np.any(self.classes < 0) or np.any(self.classes >= self.num_classes):
                raise ValueError(f"class labels must be in 0..{self.num_classes - 1}")
        elif self.classes is not None:
            raise ValueError("class labels given but num_classes is 0")

    @property
    def num_positions(self) -> int:
        return self.states.shape[1]

    @property
    def num_states(self) -> int:
        return self.vocab_size ** self.num_positions

    def require_enumerable(self):
        if self.num_states > MAX_ENUMERABLE:
            raise EnumerationError(
                f"V**N = {self.vocab_size}**{self.num_positions} = {self.num_states} exceeds "
                f"the exact-oracle bound {MAX_ENUMERABLE} (2**20)")

    def joint(self, cls: int | None = None) -> np.ndarray:
        """Probability vector over all ``V**N`` sequences, optionally given a class."""
        self.require_enumerable()
        p = self.probs
        if cls is not None:
            if self.num_classes == 0:
                raise ValueError("dataset is unconditional")
            p = np.where(self.classes == cls, p, 0.0)
            if p.sum() == 0:
                raise ValueError(f"class {cls} has zero probability")
            p = p / p.sum()
        out = np.zeros(self.num_states)
        np.add.at(out, encode(self.states, self.vocab_size), p)
        return out

    def class_probs(self) -> np.ndarray:
        if self.num_classes == 0:
            return np.ones(1)
        return np.bincount(self.classes, weights=self.probs, minlength=self.num_classes)

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` sequences; returns ``(tokens, classes)`` with classes ``None`` if unlabeled."""
        idx = rng.choice(len(self.probs), size=n, p=self.probs)
        cls = self.classes[idx] if self.classes is not None else None
        return self.states[idx], cls

    def to_dict(self) -> dict:
        states = []
        for k, tokens in enumerate(self.states):
            item = {"tokens": [int(v) for v in tokens], "prob": float(self.probs[k])}
            if self.classes is not None:
                item["class"] = int(self.classes[k])
            states.append(item)
        return {"N": self.num_positions, "V": self.vocab_size,
                "num_classes": self.num_classes, "states": states}

    @classmethod
    def from_dict(cls, data: dict) -> "ToyDataset":
        states = data["states"]
        num_classes = int(data.get("num_classes", 0))
        tokens = np.array([s["tokens"] for s in states], dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != int(data["N"]):
            raise ValueError(f"every state must have N = {data['N']} tokens")
        probs = np.array([s["prob"] for s in states], dtype=float)
        classes = np.array([s["class"] for s in states]) if num_classes > 0 else None
        return cls(tokens, probs, int(data["V"]), num_classes, classes)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ToyDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def uniform_dataset(num_positions: int, vocab_size: int) -> ToyDataset:
    states = all_sequences(num_positions, vocab_size)
    return ToyDataset(states, np.full(len(states), 1.0 / len(states)), vocab_size)


def random_dataset(num_positions: int, vocab_size: int, num_classes: int = 0,
                   concentration: float = 0.3, seed: int = 0) -> ToyDataset:
    """Dirichlet-random joint over every sequence (and class); small concentration gives strong correlations."""
    rng = np.random.default_rng(seed)
    seqs = all_sequences(num_positions, vocab_size)
    if num_classes == 0:
        p = rng.dirichlet(np.full(len(seqs), concentration))
        return ToyDataset(seqs, _renormalize(p), vocab_size)
    class_p = rng.dirichlet(np.full(num_classes, 5.0))
    probs = np.concatenate([class_p[c] * rng.dirichlet(np.full(len(seqs), concentration))
                            for c in range(num_classes)])
    states = np.tile(seqs, (num_classes, 1))
    classes = np.repeat(np.arange(num_classes), len(seqs))
    return ToyDataset(states, _renormalize(probs), vocab_size, num_classes, classes)


def copy_dataset(num_positions: int, vocab_size: int, flip: float = 0.1,
                 num_classes: int = 0) -> ToyDataset:
    """Markov chain where each token repeats its left neighbour with probability ``1 - flip``.

    With classes, class ``c`` starts the chain at token ``c % V`` with probability 0.8.
    """
    seqs = all_sequences(num_positions, vocab_size)
    stay = 1.0 - flip
    move = flip / (vocab_size - 1)
    same = seqs[:, 1:] == seqs[:, :-1]
    chain = np.prod(np.where(same, stay, move), axis=1)
    if num_classes == 0:
        return ToyDataset(seqs, _renormalize(chain / vocab_size), vocab_size)
    blocks, labels = [], []
    for c in range(num_classes):
        first = np.where(seqs[:, 0] == c % vocab_size, 0.8, 0.2 / (vocab_size - 1))
        blocks.append(first * chain / num_classes)
        labels.append(np.full(len(seqs), c))
    return ToyDataset(np.tile(seqs, (num_classes, 1)), _renormalize(np.concatenate(blocks)),
                      vocab_size, num_classes, np.concatenate(labels))


def _renormalize(p):
    p = np.asarray(p, dtype=float)
    return p / np.sum(p)
