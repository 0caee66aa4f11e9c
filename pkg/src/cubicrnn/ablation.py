"""Grid-shape ablation: one row of three spatial layers vs three rows of one.

Each shape is trained from the same seeds on the same sequences, then
scored by per-frame MSE on a fixed validation set. The comparison is
the median score over seeds.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data import builtin_glyphs
from .grid import CubicGrid, GridConfig
from .train import SeededSource, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

VAL_SEED_BASE = 10_000_000
SEED_STRIDE = 1_000_003


@dataclass(frozen=True)
class AblationSettings:
    state_channels: int = 16
    frame_size: int = 32
    num_glyphs: int = 1
    glyph_size: int = 8
    context_len: int = 5
    predict_len: int = 5
    iterations: int = 3000
    batch_size: int = 1
    learning_rate: float = 1e-3
    learning_rate_after: float = 1e-4
    seeds: tuple[int, ...] = (0, 1, 2)
    val_count: int = 8
    shapes: tuple[tuple[int, int], ...] = ((1, 3), (3, 1))  # (output rows, spatial layers)


@dataclass
class RunResult:
    shape: tuple[int, int]
    seed: int
    val_mse: float
    first_loss: float
    last_loss: float
    seconds: float


@dataclass
class AblationResult:
    runs: list[RunResult] = field(default_factory=list)

    def scores(self, shape: tuple[int, int]) -> list[float]:
        return [r.val_mse for r in self.runs if r.shape == shape]

    def median(self, shape: tuple[int, int]) -> float:
        return statistics.median(self.scores(shape))


def _source(s: AblationSettings, seed: int) -> SeededSource:
    return SeededSource(builtin_glyphs(s.glyph_size), s.num_glyphs, s.frame_size,
                        s.context_len, s.predict_len, seed=seed)


def run_one(s: AblationSettings, shape: tuple[int, int], seed: int) -> RunResult:
    rows, layers = shape
    cfg = GridConfig(spatial_layers=layers, output_layers=rows,
                     state_channels=s.state_channels, frame_height=s.frame_size,
                     frame_width=s.frame_size, context_len=s.context_len,
                     predict_len=s.predict_len)
    grid = CubicGrid.init(cfg, seed=seed, dtype=np.float32)
    tc = TrainConfig(learning_rate=s.learning_rate, lr_switch=s.iterations // 2,
                     learning_rate_after=s.learning_rate_after, batch_size=s.batch_size,
                     total_iterations=s.iterations, loss_kind="mse", seed=seed)
    t0 = time.perf_counter()
    tlog = train(grid, _source(s, seed * SEED_STRIDE), tc)
    val_src = _source(s, VAL_SEED_BASE)
    val = [val_src.sample(VAL_SEED_BASE + i) for i in range(s.val_count)]
    score = evaluate(grid, val, "mse")
    losses = tlog.losses()
    return RunResult(shape, seed, score, losses[0], losses[-1], time.perf_counter() - t0)


def run_ablation(s: AblationSettings = AblationSettings(),
                 on_result: Optional[Callable[[RunResult], None]] = None) -> AblationResult:
    out = AblationResult()
    for seed in s.seeds:
        for shape in s.shapes:
            r = run_one(s, shape, seed)
            log.info("shape %s seed %d val_mse %.4f (%.0f s)", shape, seed, r.val_mse, r.seconds)
            out.runs.append(r)
            if on_result is not None:
                on_result(r)
    return out


def settings_with(**kw) -> AblationSettings:
    return replace(AblationSettings(), **kw)


def format_rows(result: AblationResult) -> list[Sequence[object]]:
    """CSV rows: header then one row per run."""
    rows: list[Sequence[object]] = [("output_layers", "spatial_layers", "seed", "val_mse",
                                     "first_loss", "last_loss", "seconds")]
    for r in result.runs:
        rows.append((r.shape[0], r.shape[1], r.seed, repr(r.val_mse), repr(r.first_loss),
                     repr(r.last_loss), f"{r.seconds:.1f}"))
    return rows
