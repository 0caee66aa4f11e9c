"""Per-frame losses, ADAM, the step learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

from .data import SequenceSample, gen_sequence
from .errors import ConfigError, DivergenceError, NumericGuardError, UsageError
from .grid import CubicGrid, rollout, rollout_backward

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "phase", "loss_kind", "loss", "lr", "wall_ms"]


# -- losses -------------------------------------------------------------------

def _check_pair(pred, target):
    if len(pred) != len(target):
        raise UsageError(f"{len(pred)} predicted frames vs {len(target)} targets")
    if not pred:
        raise UsageError("loss needs at least one frame")
    for p, t in zip(pred, target):
        if p.shape != t.shape:
            raise UsageError(f"frame shape mismatch {p.shape} vs {t.shape}")


def mse_loss(pred: Sequence[np.ndarray], target: Sequence[np.ndarray]
             ) -> tuple[float, list[np.ndarray]]:
    """Squared error summed over each frame's pixels, averaged over frames."""
    _check_pair(pred, target)
    n = len(pred)
    total = 0.0
    grads = []
    for p, t in zip(pred, target):
        d = np.asarray(p, dtype=np.float64) - np.asarray(t, dtype=np.float64)
        total += float(np.sum(d * d))
        grads.append(2.0 * d / n)
    return total / n, grads


def bce_loss(pred: Sequence[np.ndarray], target: Sequence[np.ndarray]
             ) -> tuple[float, list[np.ndarray]]:
    """Binary cross-entropy summed over each frame's pixels, averaged over frames.

    Predictions must lie strictly inside (0, 1).
    """
    _check_pair(pred, target)
    n = len(pred)
    total = 0.0
    grads = []
    for p, y in zip(pred, target):
        p = np.asarray(p, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not (np.all(p > 0.0) and np.all(p < 1.0)):
            raise NumericGuardError("BCE needs predictions strictly inside (0, 1)")
        total += float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
        grads.append((p - y) / (p * (1.0 - p)) / n)
    return total / n, grads


LOSSES: dict[str, Callable] = {"mse": mse_loss, "bce": bce_loss}


def per_frame_errors(pred, target) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (MSE, BCE) arrays for one sequence; BCE is NaN if undefined."""
    _check_pair(pred, target)
    mse = np.array([mse_loss([p], [t])[0] for p, t in zip(pred, target)])
    bce = []
    for p, t in zip(pred, target):
        try:
            bce.append(bce_loss([p], [t])[0])
        except NumericGuardError:
            bce.append(float("nan"))
    return mse, np.array(bce)


# -- ADAM ---------------------------------------------------------------------

@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, param: np.ndarray) -> "AdamSlot":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, slot: AdamSlot, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """Bias-corrected ADAM update, applied to ``param`` and ``slot`` in place."""
    if param.shape != grad.shape or slot.m.shape != param.shape:
        raise ConfigError(f"ADAM shape mismatch: {param.shape}, {grad.shape}, {slot.m.shape}")
    slot.t += 1
    g = grad.astype(param.dtype, copy=False)
    slot.m *= beta1
    slot.m += (1.0 - beta1) * g
    slot.v *= beta2
    slot.v += (1.0 - beta2) * (g * g)
    m_hat = slot.m / (1.0 - beta1 ** slot.t)
    v_hat = slot.v / (1.0 - beta2 ** slot.t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(param.dtype, copy=False)


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    lr_switch: int = 1000
    learning_rate_after: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 1
    total_iterations: int = 2000
    loss_kind: str = "mse"
    seed: int = 0
    clip_norm: float = 0.0
    eval_every: int = 0
    checkpoint_every: int = 0
    wall_clock: bool = False

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.loss_kind not in LOSSES:
            raise ConfigError(f"loss_kind must be one of {sorted(LOSSES)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_iterations < 0 or self.lr_switch < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.learning_rate <= 0 or self.learning_rate_after <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")

    def lr_at(self, iteration: int) -> float:
        return self.learning_rate if iteration < self.lr_switch else self.learning_rate_after


# -- data sources -------------------------------------------------------------

class DataSource(Protocol):
    def batch(self, iteration: int, size: int) -> list[SequenceSample]: ...


@dataclass
class SeededSource:
    """Generates sample ``seed + iteration * size + b`` for batch slot ``b``."""

    glyphs: Sequence[np.ndarray]
    num_glyphs: int
    frame_size: int
    context_len: int
    predict_len: int
    seed: int = 0
    speed_range: tuple[float, float] = (2.0, 5.0)

    def sample(self, seed: int) -> SequenceSample:
        return gen_sequence(seed, self.num_glyphs, self.frame_size,
                            self.context_len + self.predict_len, self.glyphs,
                            context_len=self.context_len, speed_range=self.speed_range)

    def seeds(self, iteration: int, size: int) -> range:
        start = self.seed + iteration * size
        return range(start, start + size)

    def batch(self, iteration: int, size: int) -> list[SequenceSample]:
        return [self.sample(s) for s in self.seeds(iteration, size)]


@dataclass
class FixedSource:
    """Cycles through a fixed list of samples."""

    samples: Sequence[SequenceSample]

    def batch(self, iteration: int, size: int) -> list[SequenceSample]:
        n = len(self.samples)
        return [self.samples[(iteration * size + b) % n] for b in range(size)]


# -- training -----------------------------------------------------------------

def sequence_loss(grid: CubicGrid, sample: SequenceSample, loss_kind: str,
                  with_grad: bool = True):
    """Loss of one sample (decoder outputs only) and, optionally, its gradient grid."""
    result = rollout(grid, sample.context, sample.predict_len, keep_tape=with_grad)
    loss, d_preds = LOSSES[loss_kind](result.predictions, sample.targets)
    if not with_grad:
        return loss, None
    return loss, rollout_backward(grid, result, d_preds)


def batch_loss(grid: CubicGrid, samples: Sequence[SequenceSample], loss_kind: str,
               with_grad: bool = True):
    """Mean loss over ``samples`` and the matching mean gradient."""
    total = 0.0
    acc = None
    for s in samples:
        loss, g = sequence_loss(grid, s, loss_kind, with_grad)
        total += loss
        if g is not None:
            if acc is None:
                acc = g
            else:
                for (_, a), (_, b) in zip(acc.named_parameters(), g.named_parameters()):
                    a += b
    n = len(samples)
    if acc is not None and n > 1:
        for _, a in acc.named_parameters():
            a /= n
    return total / n, acc


def clip_global_norm(grads: CubicGrid, max_norm: float) -> float:
    arrays = [a for _, a in grads.named_parameters()]
    norm = math.sqrt(sum(float(np.sum(a.astype(np.float64) ** 2)) for a in arrays))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for a in arrays:
            a *= scale
    return norm


@dataclass
class MetricRecord:
    iteration: int
    phase: str
    loss_kind: str
    loss: float
    lr: float
    wall_ms: float

    def row(self) -> list[str]:
        return [str(self.iteration), self.phase, self.loss_kind, repr(float(self.loss)),
                repr(float(self.lr)), f"{self.wall_ms:.3f}"]


class MetricsWriter:
    """CSV sink flushed after every record.

    ``preamble`` lines are written first, each prefixed with ``# ``.
    """

    def __init__(self, path, preamble: Iterable[str] = (), append: bool = False):
        exists = append and _nonempty(path)
        self._fh = open(path, "a" if append else "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if not exists:
            for line in preamble:
                self._fh.write(f"# {line}\n")
            self._writer.writerow(METRICS_HEADER)
            self._fh.flush()

    def write(self, rec: MetricRecord) -> None:
        self._writer.writerow(rec.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _nonempty(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return bool(fh.read(1))
    except FileNotFoundError:
        return False


@dataclass
class TrainState:
    """Optimizer slots (by parameter name) and the number of finished iterations."""

    slots: dict[str, AdamSlot]
    iteration: int = 0

    @classmethod
    def fresh(cls, grid: CubicGrid) -> "TrainState":
        return cls({n: AdamSlot.fresh(a) for n, a in grid.named_parameters()}, 0)


@dataclass
class TrainLog:
    records: list[MetricRecord] = field(default_factory=list)

    def losses(self, phase: str = "train") -> list[float]:
        return [r.loss for r in self.records if r.phase == phase]


def evaluate(grid: CubicGrid, samples: Sequence[SequenceSample], loss_kind: str) -> float:
    return batch_loss(grid, samples, loss_kind, with_grad=False)[0]


def train(grid: CubicGrid, source: DataSource, config: TrainConfig,
          state: Optional[TrainState] = None,
          val_samples: Sequence[SequenceSample] = (),
          metrics: Optional[MetricsWriter] = None,
          on_checkpoint: Optional[Callable[[CubicGrid, TrainState], None]] = None) -> TrainLog:
    """Run ADAM on ``grid`` in place until ``config.total_iterations`` are done.

    Each iteration logs the mean batch loss measured before the update. A
    ``val`` record is added every ``eval_every`` iterations, and a ``final``
    record holds the loss of the finished parameters on the last batch.
    """
    if state is None:
        state = TrainState.fresh(grid)
    names = [n for n, _ in grid.named_parameters()]
    if set(names) != set(state.slots):
        raise ConfigError("optimizer slots do not match the grid's parameters")
    out = TrainLog()
    t0 = time.perf_counter()

    def emit(iteration, phase, loss, lr):
        wall = (time.perf_counter() - t0) * 1000.0 if config.wall_clock else 0.0
        rec = MetricRecord(iteration, phase, config.loss_kind, loss, lr, wall)
        out.records.append(rec)
        if metrics is not None:
            metrics.write(rec)

    last_batch = None
    while state.iteration < config.total_iterations:
        it = state.iteration
        lr = config.lr_at(it)
        last_batch = source.batch(it, config.batch_size)
        loss, grads = batch_loss(grid, last_batch, config.loss_kind)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at iteration {it}")
        if config.clip_norm > 0:
            clip_global_norm(grads, config.clip_norm)
        for (name, p), (_, g) in zip(grid.named_parameters(), grads.named_parameters()):
            adam_step(p, g, state.slots[name], lr, config.beta1, config.beta2, config.epsilon)
        state.iteration = it + 1
        emit(it, "train", loss, lr)
        if it % 50 == 0:
            log.info("iteration %d loss %.6g lr %g", it, loss, lr)
        if config.eval_every and val_samples and state.iteration % config.eval_every == 0:
            emit(state.iteration, "val", evaluate(grid, val_samples, config.loss_kind), lr)
        if (on_checkpoint is not None and config.checkpoint_every
                and state.iteration % config.checkpoint_every == 0):
            on_checkpoint(grid, state)

    if last_batch is not None:
        final = evaluate(grid, last_batch, config.loss_kind)
        if not math.isfinite(final):
            raise DivergenceError(f"non-finite loss {final} after training")
        emit(state.iteration, "final", final, config.lr_at(state.iteration - 1))
    return out
