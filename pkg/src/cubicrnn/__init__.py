"""CubicLSTM cells and grids for video frame prediction, written on numpy."""

from .errors import ConfigError, DivergenceError, FormatError, NumericGuardError, UsageError
from .grid import CubicGrid, GridConfig, encode, encode_decode, grid_step, rollout
from .units import CubicCellParams, SpatialState, TemporalState, cubic_lstm_step

__all__ = [
    "ConfigError", "DivergenceError", "FormatError", "NumericGuardError", "UsageError",
    "CubicGrid", "GridConfig", "encode", "encode_decode", "grid_step", "rollout",
    "CubicCellParams", "SpatialState", "TemporalState", "cubic_lstm_step",
]
