"""CubicLSTM cells wired into a 2D grid and unrolled over time.

Rows are output layers, columns are spatial layers. At every step the
first row reads a sliding window of the ``L`` most recent frames (oldest in
column 0); higher rows read the output branch of the cell below. Within a
row the spatial state flows left to right and the state leaving the last
column is carried into the first column at the next step.

Indices are 0-based: ``cell (j, l)`` is row ``j``, column ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .tensor import ConvKernel
from . import units as U
from .units import CubicCellParams, SpatialState, TemporalState


@dataclass(frozen=True)
class GridConfig:
    spatial_layers: int = 3
    output_layers: int = 1
    state_channels: int = 32
    frame_height: int = 64
    frame_width: int = 64
    frame_channels: int = 1
    temporal_kernel: int = 1
    spatial_kernel: int = 5
    context_len: int = 10
    predict_len: int = 10
    share_encoder_decoder: bool = False
    forget_bias: float = 0.0

    def __post_init__(self):
        for name in ("spatial_layers", "output_layers", "state_channels", "frame_height",
                     "frame_width", "frame_channels", "temporal_kernel", "spatial_kernel",
                     "context_len", "predict_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("temporal_kernel", "spatial_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ConfigError(f"{name} must be odd, got {getattr(self, name)}")
        if self.context_len < self.spatial_layers:
            raise ConfigError(
                f"context_len ({self.context_len}) must be >= spatial_layers "
                f"({self.spatial_layers}) so the sliding window fits"
            )

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.frame_height, self.frame_width, self.frame_channels)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.frame_height, self.frame_width, self.state_channels)


Rows = list[list[CubicCellParams]]


@dataclass(eq=False)
class CubicGrid:
    """Encoder and decoder cell arrays (J x L each) plus the frame head.

    Each cell's parameters are reused at every time step. With
    ``share_encoder_decoder`` the decoder rows are the encoder rows.
    """

    config: GridConfig
    encoder: Rows
    decoder: Rows
    frame_head: ConvKernel

    @classmethod
    def init(cls, config: GridConfig, seed: int = 0, dtype=np.float32) -> "CubicGrid":
        rng = np.random.default_rng(seed)

        def make_rows():
            rows = []
            for j in range(config.output_layers):
                cin = config.frame_channels if j == 0 else config.state_channels
                rows.append([
                    CubicCellParams.init(cin, config.state_channels, config.state_channels, rng,
                                         config.temporal_kernel, config.spatial_kernel,
                                         config.forget_bias, dtype)
                    for _ in range(config.spatial_layers)
                ])
            return rows

        encoder = make_rows()
        decoder = encoder if config.share_encoder_decoder else make_rows()
        head = ConvKernel.glorot(1, 1, 2 * config.state_channels, config.frame_channels, rng, dtype)
        return cls(config, encoder, decoder, head)

    @classmethod
    def zeros(cls, config: GridConfig, dtype=np.float32) -> "CubicGrid":
        grid = cls.init(config, 0, dtype)
        for _, a in grid.named_parameters():
            a[...] = 0
        return grid

    @property
    def dtype(self):
        return self.frame_head.weights.dtype

    @property
    def shared(self) -> bool:
        return self.decoder is self.encoder

    def named_kernels(self) -> list[tuple[str, ConvKernel]]:
        out = []
        sets = [("encoder", self.encoder)]
        if not self.shared:
            sets.append(("decoder", self.decoder))
        for prefix, rows in sets:
            for j, row in enumerate(rows):
                for l, cell in enumerate(row):
                    for kname, k in cell.kernels().items():
                        out.append((f"{prefix}.{j}.{l}.{kname}", k))
        out.append(("head", self.frame_head))
        return out

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Every trainable array once, in a fixed order."""
        return [(f"{kname}.{aname}", a)
                for kname, k in self.named_kernels()
                for aname, a in k.arrays().items()]

    def zeros_like(self) -> "CubicGrid":
        encoder = [[c.zeros_like() for c in row] for row in self.encoder]
        decoder = encoder if self.shared else [[c.zeros_like() for c in row]
                                               for row in self.decoder]
        return CubicGrid(self.config, encoder, decoder, self.frame_head.zeros_like())

    def astype(self, dtype) -> "CubicGrid":
        """Deep copy with every array cast to ``dtype``."""
        def cast(rows):
            return [[CubicCellParams(c.temporal.astype(dtype), c.spatial.astype(dtype),
                                     c.output.astype(dtype)) for c in row] for row in rows]
        enc = cast(self.encoder)
        dec = enc if self.shared else cast(self.decoder)
        return CubicGrid(self.config, enc, dec, self.frame_head.astype(dtype))


@dataclass
class GridState:
    """Per-cell temporal states and each row's spatial carry.

    ``spatial`` keeps the spatial state each cell emitted at the last step;
    only the last column of it (``spatial_carry``) feeds the next step.
    """

    temporal: list[list[TemporalState]]
    spatial: list[list[SpatialState]]
    spatial_carry: list[SpatialState]


def init_state(grid: CubicGrid) -> GridState:
    cfg = grid.config
    z = lambda: np.zeros(cfg.state_shape, dtype=grid.dtype)
    J, L = cfg.output_layers, cfg.spatial_layers
    spatial = [[SpatialState(z(), z()) for _ in range(L)] for _ in range(J)]
    return GridState(
        temporal=[[TemporalState(z(), z()) for _ in range(L)] for _ in range(J)],
        spatial=spatial,
        spatial_carry=[SpatialState(z(), z()) for _ in range(J)],
    )


def _zero_grad_state(grid: CubicGrid) -> GridState:
    return init_state(grid)


@dataclass
class StepCache:
    cells: list[list]
    head_parts: Optional[list] = None
    prediction: Optional[np.ndarray] = None


def _check_window(grid: CubicGrid, window: Sequence[np.ndarray]) -> None:
    L = grid.config.spatial_layers
    if len(window) != L:
        raise UsageError(f"window holds {len(window)} frames, grid has {L} spatial layers")
    for f in window:
        if f.shape != grid.config.frame_shape:
            raise ConfigError(f"frame shape {f.shape} != {grid.config.frame_shape}")


def _step_forward(rows: Rows, head: Optional[ConvKernel], state: GridState,
                  window: Sequence[np.ndarray]):
    J, L = len(rows), len(rows[0])
    temporal = [[None] * L for _ in range(J)]
    spatial = [[None] * L for _ in range(J)]
    carry = []
    caches = [[None] * L for _ in range(J)]
    inputs = list(window)
    for j in range(J):
        s = state.spatial_carry[j]
        need_y = j < J - 1
        ys = []
        for l in range(L):
            (t_new, s, y), caches[j][l] = U.cubic_lstm_forward(
                inputs[l], state.temporal[j][l], s, rows[j][l], with_output=need_y)
            temporal[j][l] = t_new
            spatial[j][l] = s
            ys.append(y)
        carry.append(s)
        inputs = ys
    new_state = GridState(temporal, spatial, carry)
    cache = StepCache(caches)
    prediction = None
    if head is not None:
        parts = [temporal[J - 1][L - 1].hidden, spatial[J - 1][L - 1].hidden]
        logits = T.conv2d_concat(parts, head)
        # squash in at least 64-bit so float32 runs keep predictions strictly inside (0, 1)
        prediction = T.sigmoid(logits.astype(np.promote_types(logits.dtype, np.float64)))
        cache.head_parts = parts
        cache.prediction = prediction
    return new_state, prediction, cache


def _step_backward(rows: Rows, head: Optional[ConvKernel], cache: StepCache,
                   d_pred: Optional[np.ndarray], d_state: GridState,
                   grad_rows: Rows, grad_head: ConvKernel):
    """Backpropagate one grid step; accumulates parameter gradients in place.

    Returns (gradient w.r.t. the incoming GridState, gradients w.r.t. the
    window frames).
    """
    J, L = len(rows), len(rows[0])
    d_temporal = [list(r) for r in d_state.temporal]
    d_final_spatial_hidden = None
    if d_pred is not None:
        dtype = head.weights.dtype
        d_logits = T.sigmoid_backward(cache.prediction, d_pred).astype(dtype)
        (d_h, d_sh), g_head = T.conv2d_concat_backward(cache.head_parts, head, d_logits)
        grad_head.add_(g_head)
        last = d_temporal[J - 1][L - 1]
        d_temporal[J - 1][L - 1] = TemporalState(last.cell, last.hidden + d_h)
        d_final_spatial_hidden = d_sh

    temporal_in = [[None] * L for _ in range(J)]
    carry_in = [None] * J
    d_from_above = [None] * L
    for j in reversed(range(J)):
        d_s = d_state.spatial_carry[j]
        if j == J - 1 and d_final_spatial_hidden is not None:
            d_s = SpatialState(d_s.cell, d_s.hidden + d_final_spatial_hidden)
        d_x_row = [None] * L
        for l in reversed(range(L)):
            d_x, d_tp, d_s, g = U.cubic_lstm_backward(
                cache.cells[j][l], d_temporal[j][l], d_s, d_from_above[l])
            grad_rows[j][l].add_(g)
            temporal_in[j][l] = d_tp
            d_x_row[l] = d_x
        carry_in[j] = d_s
        d_from_above = d_x_row
    spatial_in = [[None] * L for _ in range(J)]
    return GridState(temporal_in, spatial_in, carry_in), d_from_above


def grid_step(grid: CubicGrid, state: Optional[GridState], window: Sequence[np.ndarray],
              *, encoder: bool = False) -> tuple[GridState, np.ndarray]:
    """Advance one time step and predict the next frame.

    Uses the decoder cells unless ``encoder`` is set. The prediction is the
    logistic of the frame head applied to the last cell's two hidden states.
    """
    if state is None:
        raise UsageError("grid_step needs an initialised GridState (see init_state)")
    _check_window(grid, window)
    rows = grid.encoder if encoder else grid.decoder
    window = [np.asarray(f, dtype=grid.dtype) for f in window]
    new_state, pred, _ = _step_forward(rows, grid.frame_head, state, window)
    return new_state, pred


@dataclass
class _TapeEntry:
    decoder: bool
    cache: StepCache
    sources: list[int]  # buffer index of every window slot
    pred_index: Optional[int] = None


@dataclass
class Rollout:
    predictions: list[np.ndarray]
    state: GridState
    context_len: int
    tape: list[_TapeEntry] = field(default_factory=list)


def _check_context(grid: CubicGrid, context: Sequence[np.ndarray]) -> None:
    L = grid.config.spatial_layers
    if len(context) < L:
        raise UsageError(f"context has {len(context)} frames, need at least {L}")
    for f in context:
        if f.shape != grid.config.frame_shape:
            raise ConfigError(f"frame shape {f.shape} != {grid.config.frame_shape}")


def rollout(grid: CubicGrid, context: Sequence[np.ndarray], horizon: int,
            keep_tape: bool = False) -> Rollout:
    """Encode ``context`` then decode ``horizon`` frames closed-loop.

    The encoder consumes every full window of context frames. The decoder
    starts from the encoder's final state; its window always holds the ``L``
    most recent frames, using its own predictions once the context runs
    out. With ``keep_tape`` the caches needed by :func:`rollout_backward`
    are retained.
    """
    if horizon < 0:
        raise UsageError(f"horizon must be >= 0, got {horizon}")
    _check_context(grid, context)
    L = grid.config.spatial_layers
    buffer = [np.asarray(f, dtype=grid.dtype) for f in context]
    n_ctx = len(buffer)
    state = init_state(grid)
    result = Rollout([], state, n_ctx)

    for end in range(L, n_ctx + 1):
        sources = list(range(end - L, end))
        state, _, cache = _step_forward(grid.encoder, None, state, [buffer[i] for i in sources])
        if keep_tape:
            result.tape.append(_TapeEntry(False, cache, sources))

    for k in range(horizon):
        end = n_ctx + k
        sources = list(range(end - L, end))
        state, pred, cache = _step_forward(grid.decoder, grid.frame_head, state,
                                           [buffer[i] for i in sources])
        result.predictions.append(pred)
        buffer.append(pred.astype(grid.dtype))
        if keep_tape:
            result.tape.append(_TapeEntry(True, cache, sources, k))
    result.state = state
    return result


def rollout_backward(grid: CubicGrid, result: Rollout,
                     d_predictions: Sequence[np.ndarray]) -> CubicGrid:
    """Gradient of a loss on the predictions w.r.t. every grid parameter.

    Gradients flow through fed-back predictions as well as through the
    recurrent states. Returns a ``CubicGrid`` holding the gradients.
    """
    if not result.tape:
        raise UsageError("rollout was run without keep_tape=True")
    grads = grid.zeros_like()
    wide = np.promote_types(grid.dtype, np.float64)
    d_preds = [np.array(d, dtype=wide) for d in d_predictions]
    d_state = _zero_grad_state(grid)
    n_ctx = result.context_len
    for entry in reversed(result.tape):
        if entry.decoder:
            d_state, d_window = _step_backward(
                grid.decoder, grid.frame_head, entry.cache, d_preds[entry.pred_index],
                d_state, grads.decoder, grads.frame_head)
            for src, dw in zip(entry.sources, d_window):
                if src >= n_ctx:
                    d_preds[src - n_ctx] += dw
        else:
            d_state, _ = _step_backward(grid.encoder, None, entry.cache, None, d_state,
                                        grads.encoder, grads.frame_head)
    return grads


def encode(grid: CubicGrid, context: Sequence[np.ndarray]) -> GridState:
    return rollout(grid, context, 0).state


def encode_decode(grid: CubicGrid, context: Sequence[np.ndarray], horizon: int
                  ) -> list[np.ndarray]:
    return rollout(grid, context, horizon).predictions


def visualize_states(state: GridState, cell: tuple[int, int]) -> list[np.ndarray]:
    """Per-channel uint8 images of sigmoid(hidden) * 255.

    Temporal hidden channels come first, then spatial hidden channels.
    Rounding is half-up, so a zero state maps to 128.
    """
    j, l = cell
    J, L = len(state.temporal), len(state.temporal[0])
    if not (0 <= j < J and 0 <= l < L):
        raise UsageError(f"cell {cell} outside grid of {J} x {L}")
    images = []
    for hidden in (state.temporal[j][l].hidden, state.spatial[j][l].hidden):
        v = np.floor(T.sigmoid(hidden.astype(np.float64)) * 255.0 + 0.5)
        v = np.clip(v, 0, 255).astype(np.uint8)
        images.extend(v[:, :, ch] for ch in range(v.shape[2]))
    return images
