"""LSTM-family state transitions with exact backward passes.

Three units share one gate algebra:

* ``fc_lstm_step``    vectors, gates from a matrix product
* ``conv_lstm_step``  (h, w, c) tensors, gates from a convolution
* ``cubic_lstm_step`` a temporal and a spatial ConvLSTM-style branch plus a
  linear output branch that mixes the two new hidden states

Gate pre-activations are stacked in channel blocks ordered (i, f, o, c).
Every ``*_forward`` returns the outputs and a cache; the matching
``*_backward`` consumes that cache.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import ConvKernel


class TemporalState(NamedTuple):
    cell: np.ndarray
    hidden: np.ndarray


class SpatialState(NamedTuple):
    cell: np.ndarray
    hidden: np.ndarray


@dataclass
class LstmGatePack:
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    c: np.ndarray


@dataclass(eq=False)
class CubicCellParams:
    temporal: ConvKernel
    spatial: ConvKernel
    output: ConvKernel

    def __post_init__(self):
        if self.temporal.in_channels != self.spatial.in_channels:
            raise ConfigError("temporal and spatial kernels must read the same channel count")
        n4 = self.temporal.out_channels
        if n4 % 4 or self.spatial.out_channels != n4:
            raise ConfigError("branch kernels must emit 4 * state_channels")
        if self.output.in_channels != n4 // 2:
            raise ConfigError("output kernel must read 2 * state_channels")

    @property
    def state_channels(self) -> int:
        return self.temporal.out_channels // 4

    @property
    def input_channels(self) -> int:
        return self.temporal.in_channels - 2 * self.state_channels

    @classmethod
    def init(cls, input_channels: int, state_channels: int, output_channels: int,
             rng: np.random.Generator, temporal_kernel: int = 1, spatial_kernel: int = 5,
             forget_bias: float = 0.0, dtype=np.float64) -> "CubicCellParams":
        cin = input_channels + 2 * state_channels
        temporal = ConvKernel.glorot(temporal_kernel, temporal_kernel, cin, 4 * state_channels,
                                     rng, dtype)
        spatial = ConvKernel.glorot(spatial_kernel, spatial_kernel, cin, 4 * state_channels,
                                    rng, dtype)
        output = ConvKernel.glorot(1, 1, 2 * state_channels, output_channels, rng, dtype)
        for k in (temporal, spatial):
            k.bias[state_channels:2 * state_channels] = forget_bias
        return cls(temporal, spatial, output)

    def zeros_like(self) -> "CubicCellParams":
        return CubicCellParams(self.temporal.zeros_like(), self.spatial.zeros_like(),
                               self.output.zeros_like())

    def add_(self, other: "CubicCellParams") -> "CubicCellParams":
        self.temporal.add_(other.temporal)
        self.spatial.add_(other.spatial)
        self.output.add_(other.output)
        return self

    def kernels(self) -> dict[str, ConvKernel]:
        return {"temporal": self.temporal, "spatial": self.spatial, "output": self.output}


# -- shared gate algebra ------------------------------------------------------

def lstm_gates(pre: np.ndarray) -> LstmGatePack:
    """Split stacked pre-activations (last axis) into activated gates."""
    n4 = pre.shape[-1]
    if n4 % 4:
        raise ConfigError(f"gate pre-activation width {n4} not divisible by 4")
    i, f, o, c = np.split(pre, 4, axis=-1)
    return LstmGatePack(T.sigmoid(i), T.sigmoid(f), T.sigmoid(o), T.tanh_act(c))


def _lstm_update(g: LstmGatePack, cell_prev: np.ndarray):
    if cell_prev.shape != g.i.shape:
        raise ConfigError(f"state shape {cell_prev.shape} != gate shape {g.i.shape}")
    cell = T.elementwise_add(T.elementwise_mul(g.f, cell_prev), T.elementwise_mul(g.i, g.c))
    tc = T.tanh_act(cell)
    hidden = T.elementwise_mul(g.o, tc)
    return cell, hidden, tc


def _lstm_update_backward(g: LstmGatePack, cell_prev, tc, d_cell, d_hidden):
    """Return (d_pre stacked in (i, f, o, c) order, d_cell_prev)."""
    d_o, d_tc = T.elementwise_mul_backward(g.o, tc, d_hidden)
    d_cell = d_cell + T.tanh_backward(tc, d_tc)
    d_fc, d_ic = T.elementwise_add_backward(d_cell)
    d_f, d_cell_prev = T.elementwise_mul_backward(g.f, cell_prev, d_fc)
    d_i, d_c = T.elementwise_mul_backward(g.i, g.c, d_ic)
    d_pre = np.concatenate([
        T.sigmoid_backward(g.i, d_i),
        T.sigmoid_backward(g.f, d_f),
        T.sigmoid_backward(g.o, d_o),
        T.tanh_backward(g.c, d_c),
    ], axis=-1)
    return d_pre, d_cell_prev


def _zeros_if_none(d, like):
    return np.zeros_like(like) if d is None else d


# -- FC-LSTM ------------------------------------------------------------------

def fc_lstm_forward(x, prev, weight, bias):
    """``weight`` is (dim(x) + dim(H), 4 * dim(H)); ``prev`` is (C, H)."""
    cell_prev, hidden_prev = prev
    n = hidden_prev.shape[0]
    if weight.shape != (x.shape[0] + n, 4 * n) or bias.shape != (4 * n,):
        raise ConfigError(
            f"FC-LSTM weight {weight.shape} / bias {bias.shape} do not fit "
            f"x={x.shape[0]}, hidden={n}"
        )
    nx = x.shape[0]
    # block-wise, same summation order as conv2d_concat on a 1x1 grid
    pre = (x.reshape(1, -1) @ weight[:nx] + hidden_prev.reshape(1, -1) @ weight[nx:] + bias)[0]
    g = lstm_gates(pre)
    cell, hidden, tc = _lstm_update(g, cell_prev)
    return (cell, hidden), (np.concatenate([x, hidden_prev]), g, cell_prev, tc, weight)


def fc_lstm_step(x, prev, weight, bias):
    return fc_lstm_forward(x, prev, weight, bias)[0]


def fc_lstm_backward(cache, d_cell=None, d_hidden=None):
    """Return (d_x, (d_cell_prev, d_hidden_prev), d_weight, d_bias)."""
    z, g, cell_prev, tc, weight = cache
    d_cell = _zeros_if_none(d_cell, cell_prev)
    d_hidden = _zeros_if_none(d_hidden, cell_prev)
    d_pre, d_cell_prev = _lstm_update_backward(g, cell_prev, tc, d_cell, d_hidden)
    d_weight = np.outer(z, d_pre)
    d_z = weight @ d_pre
    nx = z.shape[0] - cell_prev.shape[0]
    return d_z[:nx], (d_cell_prev, d_z[nx:]), d_weight, d_pre


# -- ConvLSTM -----------------------------------------------------------------

def conv_lstm_forward(x: np.ndarray, prev: TemporalState, kernel: ConvKernel):
    T.check_tensor(x, "x")
    n = prev.hidden.shape[2]
    if kernel.in_channels != x.shape[2] + n or kernel.out_channels != 4 * n:
        raise ConfigError(
            f"ConvLSTM kernel {kernel.in_channels}->{kernel.out_channels} does not fit "
            f"x channels {x.shape[2]} and state channels {n}"
        )
    parts = [x, prev.hidden]
    pre, cols = T.conv2d_concat_forward(parts, kernel)
    g = lstm_gates(pre)
    cell, hidden, tc = _lstm_update(g, prev.cell)
    return TemporalState(cell, hidden), (parts, cols, g, prev.cell, tc, kernel)


def conv_lstm_step(x: np.ndarray, prev: TemporalState, kernel: ConvKernel) -> TemporalState:
    return conv_lstm_forward(x, prev, kernel)[0]


def conv_lstm_backward(cache, d_state: TemporalState):
    """Return (d_x, d_prev TemporalState, d_kernel)."""
    parts, cols, g, cell_prev, tc, kernel = cache
    d_pre, d_cell_prev = _lstm_update_backward(g, cell_prev, tc, d_state.cell, d_state.hidden)
    (d_x, d_hidden_prev), d_kernel = T.conv2d_concat_backward(parts, kernel, d_pre, cols)
    return d_x, TemporalState(d_cell_prev, d_hidden_prev), d_kernel


# -- CubicLSTM ----------------------------------------------------------------

@dataclass
class CubicCache:
    parts_temporal: list
    parts_spatial: list
    cols_temporal: list
    cols_spatial: list
    g_temporal: LstmGatePack
    g_spatial: LstmGatePack
    cell_prev: np.ndarray
    spatial_cell_prev: np.ndarray
    tc: np.ndarray
    tc_spatial: np.ndarray
    z_output: np.ndarray
    params: CubicCellParams


def cubic_lstm_forward(x: np.ndarray, temporal_prev: TemporalState,
                       spatial_prev: SpatialState, params: CubicCellParams,
                       with_output: bool = True):
    """One CubicLSTM update; returns ((temporal, spatial, y), cache).

    The temporal branch reads [x, H' from the previous layer, H from the
    previous step]; the spatial branch reads [x, H from the previous step,
    H' from the previous layer]. ``y`` is ``None`` when ``with_output`` is
    false, which lets callers skip an output nobody consumes.
    """
    T.check_tensor(x, "x")
    n = params.state_channels
    if x.shape[2] != params.input_channels:
        raise ConfigError(f"x has {x.shape[2]} channels, cell expects {params.input_channels}")
    for name, s in (("temporal", temporal_prev), ("spatial", spatial_prev)):
        for t in s:
            if t.shape != x.shape[:2] + (n,):
                raise ConfigError(f"{name} state shape {t.shape} != {x.shape[:2] + (n,)}")
    parts_t = [x, spatial_prev.hidden, temporal_prev.hidden]
    parts_s = [x, temporal_prev.hidden, spatial_prev.hidden]
    pre_t, cols_t = T.conv2d_concat_forward(parts_t, params.temporal)
    pre_s, cols_s = T.conv2d_concat_forward(parts_s, params.spatial)
    g_t = lstm_gates(pre_t)
    g_s = lstm_gates(pre_s)
    cell, hidden, tc = _lstm_update(g_t, temporal_prev.cell)
    s_cell, s_hidden, tc_s = _lstm_update(g_s, spatial_prev.cell)
    z_o = T.concat_channels([hidden, s_hidden])
    y = T.conv2d(z_o, params.output) if with_output else None
    cache = CubicCache(parts_t, parts_s, cols_t, cols_s, g_t, g_s, temporal_prev.cell,
                       spatial_prev.cell, tc, tc_s, z_o, params)
    return (TemporalState(cell, hidden), SpatialState(s_cell, s_hidden), y), cache


def cubic_lstm_step(x, temporal_prev, spatial_prev, params):
    return cubic_lstm_forward(x, temporal_prev, spatial_prev, params)[0]


def cubic_lstm_backward(cache: CubicCache, d_temporal: TemporalState,
                        d_spatial: SpatialState, d_y: Optional[np.ndarray]):
    """Return (d_x, d_temporal_prev, d_spatial_prev, d_params)."""
    p = cache.params
    n = p.state_channels
    d_hidden = d_temporal.hidden
    d_s_hidden = d_spatial.hidden
    if d_y is not None:
        d_zo, d_out = T.conv2d_backward(cache.z_output, p.output, d_y)
        d_h_from_y, d_sh_from_y = T.split_channels(d_zo, [n, n])
        d_hidden = d_hidden + d_h_from_y
        d_s_hidden = d_s_hidden + d_sh_from_y
    else:
        d_out = p.output.zeros_like()

    d_pre_t, d_cell_prev = _lstm_update_backward(
        cache.g_temporal, cache.cell_prev, cache.tc, d_temporal.cell, d_hidden)
    d_pre_s, d_s_cell_prev = _lstm_update_backward(
        cache.g_spatial, cache.spatial_cell_prev, cache.tc_spatial, d_spatial.cell, d_s_hidden)

    (dx_t, dsh_t, dh_t), d_temporal_k = T.conv2d_concat_backward(
        cache.parts_temporal, p.temporal, d_pre_t, cache.cols_temporal)
    (dx_s, dh_s, dsh_s), d_spatial_k = T.conv2d_concat_backward(
        cache.parts_spatial, p.spatial, d_pre_s, cache.cols_spatial)

    d_x = dx_t + dx_s
    d_tprev = TemporalState(d_cell_prev, dh_t + dh_s)
    d_sprev = SpatialState(d_s_cell_prev, dsh_t + dsh_s)
    return d_x, d_tprev, d_sprev, CubicCellParams(d_temporal_k, d_spatial_k, d_out)
