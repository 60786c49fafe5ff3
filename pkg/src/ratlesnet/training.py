"""Adam updates and the training loop with early stopping.

Training runs mini-batches of one scan: per epoch the train set is
reshuffled with a seeded generator and each scan triggers one Adam step.
After every epoch the mean validation loss decides bookkeeping: the best
snapshot is kept, and five consecutive strict increases (by default) end
the run.  The returned model carries the best-validation parameters, not
the last ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Sample
from .errors import ConfigError, NumericError, StateError
from .model import Model, forward
from .ops import softmax_cross_entropy
from .tensor import Graph, Tensor, backward

# Callback invoked after each epoch with (epoch, model, train_loss, val_loss);
# returning True ends training early with the best snapshot restored.
EpochCallback = Callable[[int, Model, float, float], bool]


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class TrainPolicy:
    max_epochs: int = 1000
    patience: int = 5
    batch_size: int = 1

    def __post_init__(self) -> None:
        if self.batch_size != 1:
            raise ConfigError("only mini-batches of one scan are supported")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Bundle of the training knobs exposed through run configs."""

    lr: float = 1e-5
    max_epochs: int = 1000
    patience: int = 5
    val_fraction: float = 0.2

    def policy(self) -> TrainPolicy:
        return TrainPolicy(max_epochs=self.max_epochs, patience=self.patience)

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to params in place."""
    if len(params) != len(grads):
        raise StateError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise StateError(f"state holds {len(state.m)} moment buffers for {len(params)} params")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1 ** state.step
    correct2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise StateError("adam_step needs a gradient for every parameter")
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise StateError(f"gradient/state shape {g.shape} vs parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / correct1
        v_hat = v / correct2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stopped_early: bool


def _as_input(sample: Sample, dtype: np.dtype) -> Tensor:
    return Tensor(sample.volume.values.astype(dtype, copy=False)[None, None])


def _scan_loss(model: Model, x: Tensor, labels: np.ndarray) -> float:
    logits = forward(model, x)
    return softmax_cross_entropy(logits, labels).item()


def mean_validation_loss(model: Model, val_set: Sequence[Sample]) -> float:
    """Mean per-scan loss in manifest order (fixed reduction order)."""
    dtype = next(iter(model.layers.values())).weight.dtype
    total = 0.0
    for sample in val_set:
        total += _scan_loss(model, _as_input(sample, dtype), sample.mask.values)
    return total / len(val_set)


def train(model: Model, train_set: Sequence[Sample], val_set: Sequence[Sample],
          policy: TrainPolicy | None = None, adam: AdamState | None = None,
          seed: int = 0, epoch_callback: EpochCallback | None = None) -> TrainResult:
    """Fit the model; on return it holds the best-validation snapshot."""
    if not train_set or not val_set:
        raise ConfigError("train and validation sets must be non-empty")
    policy = policy or TrainPolicy()
    adam = adam or AdamState()
    dtype = next(iter(model.layers.values())).weight.dtype
    inputs = [_as_input(s, dtype) for s in train_set]
    labels = [s.mask.values for s in train_set]
    params = [t for _, t in model.parameters()]
    model.set_requires_grad(True)

    rng = np.random.default_rng(seed)
    best_val = np.inf
    best_epoch = 0
    best_snapshot = [p.data.copy() for p in params]
    prev_val: float | None = None
    streak = 0
    history: list[tuple[int, float, float]] = []
    epoch = 0
    stopped_early = False

    for epoch in range(1, policy.max_epochs + 1):
        try:
            epoch_losses = []
            for idx in rng.permutation(len(inputs)):
                with Graph() as tape:
                    logits = forward(model, inputs[idx])
                    loss = softmax_cross_entropy(logits, labels[idx])
                model.zero_grad()
                backward(tape, loss)
                adam_step(params, [p.grad for p in params], adam)
                epoch_losses.append(loss.item())
            train_loss = float(np.mean(epoch_losses))
            # Module-level lookup on purpose: tests substitute this hook.
            val_loss = mean_validation_loss(model, val_set)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from exc
        history.append((epoch, train_loss, val_loss))

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = [p.data.copy() for p in params]
        if epoch_callback is not None and epoch_callback(epoch, model, train_loss, val_loss):
            stopped_early = True
            break
        if prev_val is not None and val_loss > prev_val:
            streak += 1
        else:
            streak = 0
        prev_val = val_loss
        if streak >= policy.patience:
            stopped_early = True
            break

    for p, snap in zip(params, best_snapshot):
        p.data = snap
    model.zero_grad()
    return TrainResult(history=history, best_epoch=best_epoch, best_val_loss=float(best_val),
                       epochs_run=epoch, stopped_early=stopped_early)


def write_epoch_log(history: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    """Tab-separated epoch log: epoch, train loss, validation loss."""
    lines = [f"{e}\t{tr:.6f}\t{va:.6f}" for e, tr, va in history]
    Path(path).write_text("\n".join(lines) + "\n")
