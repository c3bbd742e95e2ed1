"""Adam, learning-rate schedule, training loop and per-horizon evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_model
from .data import WindowPair, stack_windows
from .errors import ContractError, InputError
from .model import AGN, ParamStore, mpjpe_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

BASE_LR = 5e-4
LR_DECAY = 0.96
LR_FLOOR = 1e-4


def lr_at_epoch(epoch: int, base: float = BASE_LR, decay: float = LR_DECAY,
                floor: float = LR_FLOOR) -> float:
    if epoch < 0:
        raise InputError(f"epoch must be >= 0, got {epoch}")
    lr = base * decay ** epoch
    return lr if lr >= floor else min(floor, base)


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = BASE_LR
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: OptimState, lr: float | None = None) -> None:
    """One bias-corrected Adam update of every parameter, then zero the gradients."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")
    if lr is not None:
        state.lr = lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data[...] = (p.data - update).astype(p.dtype)
    params.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = BASE_LR
    lr_decay: float = LR_DECAY
    lr_floor: float = LR_FLOOR
    seed: int = 0
    checkpoint_dir: str | None = None
    loss_csv: str | None = None


@dataclass
class HistoryRow:
    epoch: int
    iteration: int
    loss: float
    lr: float


def train(model: AGN, dataset: Sequence[WindowPair], config: TrainConfig,
          state: OptimState | None = None) -> list[HistoryRow]:
    """Mini-batch Adam on mean MPJPE; one row per iteration.

    Batches are reshuffled every epoch from ``config.seed``.  A checkpoint is
    written per epoch when ``checkpoint_dir`` is set.
    """
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    state = state or OptimState(lr=config.lr)
    inputs, targets = stack_windows(dataset)
    dtype = next(iter(model.params.items()))[1].dtype
    inputs, targets = inputs.astype(dtype), targets.astype(dtype)
    history: list[HistoryRow] = []
    first = None
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    iteration = 0
    for epoch in range(config.epochs):
        lr = lr_at_epoch(epoch, config.lr, config.lr_decay, config.lr_floor)
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss = mpjpe_loss(model.forward(Tensor(inputs[idx])), Tensor(targets[idx]))
            value = float(loss.data)
            T.backward(loss)
            adam_step(model.params, state, lr)
            history.append(HistoryRow(epoch, iteration, value, lr))
            iteration += 1
            first = value if first is None else first
            if not math.isfinite(value) or value > 1e3 * max(first, 1e-12):
                log.warning("loss diverging at iteration %d: %g", iteration, value)
        if ckpt_dir:
            save_model(model, ckpt_dir / f"epoch_{epoch + 1:03d}.agnc")
    if config.loss_csv:
        write_history(history, config.loss_csv)
    return history


def write_history(history: Sequence[HistoryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "iteration", "loss", "lr"])
        for row in history:
            w.writerow([row.epoch, row.iteration, repr(row.loss), repr(row.lr)])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [HistoryRow(int(r["epoch"]), int(r["iteration"]), float(r["loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    horizons: list[int]
    model: dict[int, float]
    baseline: dict[int, float]
    n_samples: int
    fps: float = 25.0

    def ms(self, horizon: int) -> float:
        return 1000.0 * horizon / self.fps

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(h, self.ms(h), self.model[h], self.baseline[h]) for h in self.horizons]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon_frames", "horizon_ms", "mpjpe", "zero_velocity"])
            for h, ms, m, b in self.rows():
                w.writerow([h, f"{ms:g}", f"{m:.6f}", f"{b:.6f}"])

    def table(self) -> str:
        lines = [f"{'frames':>6} {'ms':>7} {'mpjpe':>12} {'zero-vel':>12}"]
        for h, ms, m, b in self.rows():
            lines.append(f"{h:>6d} {ms:>7g} {m:>12.4f} {b:>12.4f}")
        lines.append(f"samples={self.n_samples}")
        return "\n".join(lines)


def zero_velocity(inputs: np.ndarray, t_out: int) -> np.ndarray:
    """Repeat the last observed frame ``t_out`` times; ``inputs`` is ``[..., N, T, 3]``."""
    last = inputs[..., -1:, :]
    return np.repeat(last, t_out, axis=-2)


def horizon_errors(pred: np.ndarray, truth: np.ndarray, horizons: Sequence[int]) -> np.ndarray:
    """Per-sample MPJPE at each horizon frame, ``[B, len(horizons)]`` (float64)."""
    idx = [h - 1 for h in horizons]
    diff = pred[..., idx, :].astype(np.float64) - truth[..., idx, :].astype(np.float64)
    return np.sqrt((diff ** 2).sum(-1)).mean(axis=-2)


def evaluate(predict: AGN | Callable[[np.ndarray], np.ndarray], dataset: Sequence[WindowPair],
             horizons: Sequence[int] = (2, 4, 8, 10), batch_size: int = 64,
             fps: float = 25.0) -> EvalReport:
    """Average MPJPE at each horizon (1-based frame offset) plus the zero-velocity baseline."""
    if len(dataset) == 0:
        raise InputError("evaluation dataset is empty")
    horizons = sorted(int(h) for h in horizons)
    t_out = dataset[0].target.shape[1]
    if not horizons or horizons[0] < 1 or horizons[-1] > t_out:
        raise InputError(f"horizons {horizons} outside 1..{t_out}")
    fn = predict.predict if isinstance(predict, AGN) else predict
    model_err, base_err = [], []
    for lo in range(0, len(dataset), batch_size):
        x, y = stack_windows(dataset[lo:lo + batch_size])
        pred = np.asarray(fn(x))
        model_err.append(horizon_errors(pred, y, horizons))
        base_err.append(horizon_errors(zero_velocity(x, t_out), y, horizons))
    model_err = np.concatenate(model_err)
    base_err = np.concatenate(base_err)
    n = len(dataset)
    # fsum is exactly rounded, so the averages do not depend on sample order
    return EvalReport(
        horizons,
        {h: math.fsum(model_err[:, i]) / n for i, h in enumerate(horizons)},
        {h: math.fsum(base_err[:, i]) / n for i, h in enumerate(horizons)},
        n,
        fps,
    )
