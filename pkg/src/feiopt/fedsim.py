"""Toy federated averaging on a synthetic convex task.

Each edge server holds ``n_k`` samples of a two-class Gaussian-blob problem
and trains a logistic-regression model locally for ``e_k`` passes of
minibatch size ``b_k``; the coordinator averages the participants' models
weighted by their sample counts.  Every server joins a round independently
with probability ``C``.

Random streams are derived from the seed with fixed tags so that runs are
reproducible and a single-server run shares its shuffle order with
:func:`centralized_sgd`:

    datasets       default_rng([seed, 0, k])
    participation  default_rng([seed, 1])
    shuffling      default_rng([seed, 2, round, k])
    test set       default_rng([seed, 3])
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_DIM = 5
BLOB_OFFSET = 0.5


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class FedConfig:
    samples: tuple[int, ...]
    batch: tuple[int, ...]
    passes: tuple[int, ...]
    participation: float = 1.0
    rounds: int = 50
    lr: float = 0.1
    seed: int = 42
    dim: int = DEFAULT_DIM
    test_size: int = 2000

    @property
    def num_servers(self) -> int:
        return len(self.samples)

    def validate(self) -> None:
        K = self.num_servers
        if K < 1 or len(self.batch) != K or len(self.passes) != K:
            raise ValueError("samples, batch and passes need one entry per server")
        if not 0 < self.participation <= 1:
            raise ValueError(f"participation must be in (0, 1], got {self.participation}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be finite and >= 0")
        if not any(n > 0 for n in self.samples):
            raise ValueError("at least one server needs samples")
        for n, b, e in zip(self.samples, self.batch, self.passes):
            if n < 0 or e < 1 or b < 1:
                raise ValueError(f"need n >= 0, b >= 1, e >= 1 (got n={n}, b={b}, e={e})")


@dataclass
class ModelState:
    params: np.ndarray
    round: int = 0


@dataclass
class RoundRecord:
    round: int
    participants: tuple[int, ...]
    loss: float
    accuracy: float


@dataclass
class FedCurve:
    records: list[RoundRecord] = field(default_factory=list)
    steps: list[dict[int, int]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "participants", "loss", "accuracy"])
            for r in self.records:
                w.writerow([r.round, " ".join(str(k) for k in r.participants), repr(r.loss), repr(r.accuracy)])


def _blobs(rng: np.random.Generator, n: int, dim: int) -> Dataset:
    y = rng.integers(0, 2, size=n).astype(float)
    X = rng.standard_normal((n, dim)) + np.where(y[:, None] > 0, BLOB_OFFSET, -BLOB_OFFSET)
    return Dataset(X, y)


def generate_partitions(seed: int, num_servers: int, samples: Sequence[int], dim: int = DEFAULT_DIM) -> list[Dataset]:
    """IID two-class Gaussian-blob datasets, one per server."""
    if len(samples) != num_servers:
        raise ValueError("need one sample count per server")
    return [_blobs(np.random.default_rng([seed, 0, k]), int(n), dim) for k, n in enumerate(samples)]


def test_set(seed: int, size: int, dim: int = DEFAULT_DIM) -> Dataset:
    return _blobs(np.random.default_rng([seed, 3]), size, dim)


test_set.__test__ = False  # not a pytest test


def pool(datasets: Sequence[Dataset]) -> Dataset:
    return Dataset(np.concatenate([d.X for d in datasets]), np.concatenate([d.y for d in datasets]))


def init_params(dim: int = DEFAULT_DIM) -> np.ndarray:
    return np.zeros(dim + 1)


def _logits(params: np.ndarray, X: np.ndarray) -> np.ndarray:
    return X @ params[:-1] + params[-1]


def loss(params: np.ndarray, data: Dataset) -> float:
    """Mean logistic loss."""
    z = _logits(params, data.X)
    return float(np.mean(np.logaddexp(0.0, z) - data.y * z))


def accuracy(params: np.ndarray, data: Dataset) -> float:
    return float(np.mean((_logits(params, data.X) > 0) == (data.y > 0)))


def gradient(params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = X @ params[:-1] + params[-1]
    r = 0.5 * (1.0 + np.tanh(0.5 * z)) - y  # sigmoid(z) - y, overflow-free
    g = np.empty_like(params)
    g[:-1] = X.T @ r / len(y)
    g[-1] = r.mean()
    return g


def local_train(
    params: np.ndarray, data: Dataset, b: int, e: int, lr: float, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """``e`` shuffled passes of minibatch SGD; returns the new parameters and the step count.

    The last minibatch of a pass may be short, so a pass takes ``ceil(n / b)``
    steps.
    """
    n = data.size
    if not 1 <= b <= n:
        raise ValueError(f"need 1 <= b <= n (got b={b}, n={n})")
    if e < 1:
        raise ValueError("e must be >= 1")
    p = np.array(params, dtype=float, copy=True)
    steps = 0
    for _ in range(e):
        order = rng.permutation(n)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
            for start in range(0, n, b):
                idx = order[start : start + b]
                p -= lr * gradient(p, data.X[idx], data.y[idx])
                steps += 1
            ok = np.all(np.isfinite(p)) and math.isfinite(loss(p, data))
        if not ok:
            raise DivergenceError(f"training diverged after {steps} steps; lower the learning rate")
    return p, steps


def aggregate(updates: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Sample-weighted average of the participants' parameters."""
    if not updates:
        raise ValueError("aggregate needs at least one update")
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ValueError("participants hold no samples")
    out = np.zeros_like(np.asarray(updates[0][0], dtype=float))
    for params, n in updates:  # fixed participant order
        out += (n / total) * np.asarray(params, dtype=float)
    return out


def _participants(rng: np.random.Generator, eligible: np.ndarray, C: float) -> tuple[int, ...]:
    while True:
        draw = rng.random(eligible.size) < C
        chosen = tuple(int(k) for k in np.nonzero(draw & eligible)[0])
        if chosen:
            return chosen


def _effective_batches(cfg: FedConfig) -> list[int]:
    return [min(b, n) if n > 0 else b for b, n in zip(cfg.batch, cfg.samples)]


def run_rounds(cfg: FedConfig) -> FedCurve:
    """Synchronised FedAvg rounds; one curve row per round."""
    cfg.validate()
    data = generate_partitions(cfg.seed, cfg.num_servers, cfg.samples, cfg.dim)
    pooled = pool([d for d in data if d.size > 0])
    test = test_set(cfg.seed, cfg.test_size, cfg.dim)
    eligible = np.array([n > 0 for n in cfg.samples])
    batches = _effective_batches(cfg)
    part_rng = np.random.default_rng([cfg.seed, 1])
    state = ModelState(init_params(cfg.dim))
    curve = FedCurve()
    for r in range(1, cfg.rounds + 1):
        chosen = _participants(part_rng, eligible, cfg.participation)
        updates, steps = [], {}
        for k in chosen:
            rng = np.random.default_rng([cfg.seed, 2, r, k])
            p, s = local_train(state.params, data[k], batches[k], cfg.passes[k], cfg.lr, rng)
            updates.append((p, data[k].size))
            steps[k] = s
        state = ModelState(aggregate(updates), r)
        curve.records.append(RoundRecord(r, chosen, loss(state.params, pooled), accuracy(state.params, test)))
        curve.steps.append(steps)
    return curve


def centralized_sgd(
    n: int, b: int, e: int, rounds: int, lr: float, seed: int = 42, dim: int = DEFAULT_DIM, test_size: int = 2000
) -> FedCurve:
    """Plain minibatch SGD on one pool, with the single-server streams of :func:`run_rounds`."""
    data = generate_partitions(seed, 1, [n], dim)[0]
    test = test_set(seed, test_size, dim)
    b = min(b, n)
    params = init_params(dim)
    curve = FedCurve()
    for r in range(1, rounds + 1):
        rng = np.random.default_rng([seed, 2, r, 0])
        order_steps = 0
        for _ in range(e):
            order = rng.permutation(n)
            for start in range(0, n, b):
                idx = order[start : start + b]
                params = params - lr * gradient(params, data.X[idx], data.y[idx])
                order_steps += 1
        curve.records.append(RoundRecord(r, (0,), loss(params, data), accuracy(params, test)))
        curve.steps.append({0: order_steps})
    return curve
