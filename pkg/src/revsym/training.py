"""Empirical-risk training with Adam and an exponentially decaying learning rate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Dataset
from .reversible import Kind, Model, parse_kind


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, history=None, model=None):
        super().__init__(msg)
        self.history = history
        self.model = model


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20000
    batch_size: int = 0
    lr0: float = 1e-3
    decay_rate: float = 0.9995
    split_ratio: float = 0.9
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    keep_best: bool = False

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 0:
            raise ValueError("epochs and batch_size must be non-negative")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay_rate**epoch


@dataclass
class AdamState:
    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n))

    def to_dict(self) -> dict:
        return {"step_count": self.step_count, "first_moment": self.first_moment.tolist(),
                "second_moment": self.second_moment.tolist()}

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls(int(d["step_count"]), np.array(d["first_moment"], dtype=float),
                   np.array(d["second_moment"], dtype=float))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float
    wall_time: float


@dataclass
class LossHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def train_loss(self) -> np.ndarray:
        return np.array([r.train_loss for r in self.records])

    @property
    def val_loss(self) -> np.ndarray:
        return np.array([r.val_loss for r in self.records])

    def to_csv(self, include_time: bool = False) -> str:
        """Header ``epoch,train_loss,val_loss,lr,seconds``.

        ``seconds`` is left blank unless ``include_time``; wall time would make
        otherwise identical runs differ byte-wise.
        """
        lines = ["epoch,train_loss,val_loss,lr,seconds"]
        for r in self.records:
            sec = repr(r.wall_time) if include_time else ""
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.learning_rate!r},{sec}")
        return "\n".join(lines) + "\n"

    def save(self, path, include_time: bool = False) -> None:
        Path(path).write_text(self.to_csv(include_time))


def split_dataset(ds: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(ds)
    n_train = int(np.floor(ratio * n))
    if not 0 < ratio < 1 or n_train < 1 or n_train >= n:
        raise ValueError(f"cannot split {n} pairs with ratio {ratio} into two nonempty sets")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def loss(model: Model, X, Y) -> tuple[float, float]:
    """Return (mean squared distance, mean distance) of ``model(X)`` to ``Y``."""
    D = model.forward(np.atleast_2d(X)) - np.atleast_2d(Y)
    sq = np.sum(D * D, axis=1)
    return float(np.mean(sq)), float(np.mean(np.sqrt(sq)))


def loss_and_grad(model: Model, X, Y) -> tuple[float, np.ndarray]:
    out, pullback = model.linearize(X)
    D = out - Y
    value = float(np.mean(np.sum(D * D, axis=1)))
    _, g = pullback(2.0 * D / len(X))
    return value, g


def adam_step(params, grads, state: AdamState, lr: float, cfg: TrainConfig):
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.first_moment.shape != params.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergedError("non-finite gradient")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * grads
    v = b2 * state.second_moment + (1.0 - b2) * grads * grads
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    new = params - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return new, AdamState(t, m, v)


def train(model: Model, ds: Dataset, cfg: TrainConfig, callback=None,
          state: AdamState | None = None):
    """Fit ``model`` to the training split of ``ds``.

    Each history record holds the losses at the parameters the epoch started
    from; the returned model includes the final epoch's update.

    Returns ``(model, history, adam_state)``.  ``callback(epoch, model)`` is
    called after every update.  Aborts with :class:`TrainingDivergedError`
    (carrying the partial history and the last finite model) if the loss is
    non-finite or exceeds a million times its initial value.
    """
    if ds.dim != model.dim:
        raise ValueError(f"dataset dim {ds.dim} != model dim {model.dim}")
    history = LossHistory()
    if cfg.epochs == 0:
        return model, history, state or AdamState.zeros(model.n_params)
    train_ds, val_ds = split_dataset(ds, cfg.split_ratio, cfg.seed)
    X, Y = train_ds.inputs, train_ds.targets
    theta = model.params()
    state = state or AdamState.zeros(len(theta))
    rng = np.random.default_rng([cfg.seed, 1])
    bs = cfg.batch_size if 0 < cfg.batch_size < len(X) else len(X)
    initial = None
    best = (np.inf, model)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        current = model.with_params(theta)
        start_model = current
        val, _ = loss(start_model, val_ds.inputs, val_ds.targets)
        order = np.arange(len(X)) if bs == len(X) else rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), bs):
            idx = order[start:start + bs]
            value, g = loss_and_grad(current, X[idx], Y[idx])
            if initial is None:
                initial = value
            if not np.isfinite(value) or value > 1e6 * max(initial, 1e-300):
                raise TrainingDivergedError(f"loss {value} at epoch {epoch}", history, current)
            total += value * len(idx)
            try:
                theta, state = adam_step(theta, g, state, lr, cfg)
            except TrainingDivergedError as err:
                raise TrainingDivergedError(f"{err} at epoch {epoch}", history, current) from None
            current = model.with_params(theta)
        history.records.append(EpochRecord(epoch, total / len(X), val, lr, time.perf_counter() - t0))
        if cfg.keep_best and val < best[0]:
            best = (val, start_model)
        if callback is not None:
            callback(epoch, current)
    final = model.with_params(theta)
    return (best[1] if cfg.keep_best else final), history, state


def data_scale(ds: Dataset, factor: float = 1.0) -> float:
    """``factor`` times the largest absolute input coordinate of ``ds``."""
    return float(factor * np.max(np.abs(ds.inputs)))


# Polynomial stacks overflow quickly once |x / c| approaches 1, so Hénon models
# see inputs in [-1/3, 1/3]; tanh-based models train best on unit-sized inputs.
SCALE_FACTORS = {Kind.REVERSIBLE_HENON: 3.0}


def default_scale(kind, ds: Dataset) -> float:
    """Conjugation scale ``c`` used when a model is fitted to ``ds`` without an explicit one."""
    return data_scale(ds, SCALE_FACTORS.get(parse_kind(kind), 1.0))
