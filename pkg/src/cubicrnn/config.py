"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, keys are dotted
(``grid.spatial_layers = 3``). Command-line ``--set key=value`` overrides
win over file values; a key may be given by its last component when that is
unambiguous (``total_iterations=0``). The canonical text form produced by
:meth:`RunConfig.to_text` is echoed into checkpoints and metrics files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from .data import SequenceSample, builtin_glyphs, load_idx_images
from .errors import ConfigError, FormatError
from .grid import GridConfig
from .train import SeededSource, TrainConfig

# key -> (type, default)
SCHEMA: dict[str, tuple[type, Any]] = {
    "grid.spatial_layers": (int, 3),
    "grid.output_layers": (int, 1),
    "grid.state_channels": (int, 32),
    "grid.temporal_kernel": (int, 1),
    "grid.spatial_kernel": (int, 5),
    "grid.share_encoder_decoder": (bool, False),
    "grid.forget_bias": (float, 0.0),
    "data.frame_size": (int, 64),
    "data.num_glyphs": (int, 2),
    "data.glyphs": (str, "builtin"),
    "data.glyph_size": (int, 12),
    "data.context_len": (int, 10),
    "data.predict_len": (int, 10),
    "data.speed_min": (float, 2.0),
    "data.speed_max": (float, 5.0),
    "data.seed": (int, 0),
    "data.val_seed": (int, 1_000_000),
    "data.val_count": (int, 16),
    "train.learning_rate": (float, 1e-3),
    "train.lr_switch": (int, 1000),
    "train.learning_rate_after": (float, 1e-4),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.epsilon": (float, 1e-8),
    "train.batch_size": (int, 4),
    "train.total_iterations": (int, 2000),
    "train.loss": (str, "mse"),
    "train.seed": (int, 0),
    "train.clip_norm": (float, 0.0),
    "train.eval_every": (int, 100),
    "train.checkpoint_every": (int, 500),
    "train.dtype": (str, "float32"),
    "train.wall_clock": (bool, False),
    "paths.checkpoint": (str, "run/model.ckpt"),
    "paths.metrics": (str, "run/metrics.csv"),
    "paths.output_dir": (str, "run"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str):
    kind = SCHEMA[key][0]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw.replace("_", ""))
    if kind is float:
        return float(raw)
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_key(key: str) -> str:
    key = key.strip()
    if key in SCHEMA:
        return key
    matches = [k for k in SCHEMA if k.rsplit(".", 1)[-1] == key]
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise KeyError(f"ambiguous key {key!r}: {', '.join(matches)}")
    raise KeyError(f"unknown key {key!r}")


def parse_lines(lines: Iterable[str], origin: str) -> dict[str, tuple[Any, str]]:
    """Parse config lines into ``key -> (value, location)``."""
    out: dict[str, tuple[Any, str]] = {}
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{origin}:{no}"
        if "=" not in text:
            raise ConfigError(f"{where}: expected 'key = value', got {text!r}")
        k, v = text.split("=", 1)
        try:
            key = resolve_key(k)
            out[key] = (_convert(key, v), where)
        except (KeyError, ValueError) as exc:
            msg = exc.args[0] if exc.args else str(exc)
            raise ConfigError(f"{where}: {msg}") from None
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, tuple[Any, str]]:
    out = {}
    for item in items:
        where = f"--set {item}"
        if "=" not in item:
            raise ConfigError(f"{where}: expected key=value")
        k, v = item.split("=", 1)
        try:
            key = resolve_key(k)
            out[key] = (_convert(key, v), where)
        except (KeyError, ValueError) as exc:
            msg = exc.args[0] if exc.args else str(exc)
            raise ConfigError(f"{where}: {msg}") from None
    return out


@dataclass
class RunConfig:
    values: dict[str, Any]
    where: dict[str, str]

    @classmethod
    def from_sources(cls, *layers: dict[str, tuple[Any, str]]) -> "RunConfig":
        values = {k: d for k, (_, d) in SCHEMA.items()}
        where = {k: "default" for k in SCHEMA}
        for layer in layers:
            for k, (v, loc) in layer.items():
                values[k] = v
                where[k] = loc
        cfg = cls(values, where)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides: Iterable[str] = ()) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = p.read_text(encoding="utf-8")
        return cls.from_sources(parse_lines(text.splitlines(), str(path)),
                                parse_overrides(overrides))

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>",
                  overrides: Iterable[str] = ()) -> "RunConfig":
        return cls.from_sources(parse_lines(text.splitlines(), origin), parse_overrides(overrides))

    def __getitem__(self, key: str):
        return self.values[resolve_key(key)]

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)

    def _fail(self, key: str, msg: str):
        raise ConfigError(f"{self.where[key]}: {key}: {msg}")

    def validate(self) -> None:
        v = self.values
        for key in ("data.frame_size", "data.num_glyphs", "data.glyph_size",
                    "data.context_len", "data.predict_len"):
            if v[key] < 1:
                self._fail(key, "must be >= 1")
        if v["data.val_count"] < 0:
            self._fail("data.val_count", "must be >= 0")
        if not 0 <= v["data.speed_min"] <= v["data.speed_max"]:
            self._fail("data.speed_max", "need 0 <= speed_min <= speed_max")
        if v["train.dtype"] not in ("float32", "float64"):
            self._fail("train.dtype", "must be float32 or float64")
        if v["data.glyphs"] == "builtin" and v["data.glyph_size"] >= v["data.frame_size"]:
            self._fail("data.glyph_size", "glyphs must be smaller than the frame")
        for key in ("train.eval_every", "train.checkpoint_every"):
            if v[key] < 0:
                self._fail(key, "must be >= 0")
        for build in (self.grid_config, self.train_config):
            try:
                build()
            except ConfigError as exc:
                raise ConfigError(f"{self._locate(str(exc))}: {exc}") from None

    def _locate(self, message: str) -> str:
        """Location of the setting a validation message talks about."""
        named = [k for k in SCHEMA if k.rsplit(".", 1)[-1] in message]
        named = [k for k in named if self.where[k] != "default"] or named
        if named:
            return self.where[max(named, key=len)]
        given = [loc for loc in self.where.values() if loc != "default"]
        return given[-1] if given else "default"

    # -- builders -------------------------------------------------------------

    @property
    def dtype(self):
        return np.dtype(self.values["train.dtype"])

    def grid_config(self) -> GridConfig:
        v = self.values
        return GridConfig(
            spatial_layers=v["grid.spatial_layers"],
            output_layers=v["grid.output_layers"],
            state_channels=v["grid.state_channels"],
            frame_height=v["data.frame_size"],
            frame_width=v["data.frame_size"],
            frame_channels=1,
            temporal_kernel=v["grid.temporal_kernel"],
            spatial_kernel=v["grid.spatial_kernel"],
            context_len=v["data.context_len"],
            predict_len=v["data.predict_len"],
            share_encoder_decoder=v["grid.share_encoder_decoder"],
            forget_bias=v["grid.forget_bias"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            learning_rate=v["train.learning_rate"],
            lr_switch=v["train.lr_switch"],
            learning_rate_after=v["train.learning_rate_after"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            epsilon=v["train.epsilon"],
            batch_size=v["train.batch_size"],
            total_iterations=v["train.total_iterations"],
            loss_kind=v["train.loss"],
            seed=v["train.seed"],
            clip_norm=v["train.clip_norm"],
            eval_every=v["train.eval_every"],
            checkpoint_every=v["train.checkpoint_every"],
            wall_clock=v["train.wall_clock"],
        )

    def glyphs(self) -> list[np.ndarray]:
        src = self.values["data.glyphs"]
        if src == "builtin":
            try:
                return builtin_glyphs(self.values["data.glyph_size"])
            except ConfigError as exc:
                raise ConfigError(f"{self.where['data.glyph_size']}: {exc}") from None
        try:
            glyphs = load_idx_images(src)
        except FileNotFoundError:
            raise ConfigError(f"{self.where['data.glyphs']}: glyph file not found: {src}") from None
        except FormatError as exc:
            raise ConfigError(f"{self.where['data.glyphs']}: {exc}") from None
        if not glyphs:
            raise ConfigError(f"{self.where['data.glyphs']}: glyph file {src} holds no images")
        size = self.values["data.frame_size"]
        if max(max(g.shape) for g in glyphs) >= size:
            raise ConfigError(f"{self.where['data.glyphs']}: glyphs do not fit a {size} frame")
        return glyphs

    def source(self, glyphs: Optional[list[np.ndarray]] = None, seed: Optional[int] = None
               ) -> SeededSource:
        v = self.values
        return SeededSource(
            glyphs=glyphs if glyphs is not None else self.glyphs(),
            num_glyphs=v["data.num_glyphs"],
            frame_size=v["data.frame_size"],
            context_len=v["data.context_len"],
            predict_len=v["data.predict_len"],
            seed=v["data.seed"] if seed is None else seed,
            speed_range=(v["data.speed_min"], v["data.speed_max"]),
        )

    def samples(self, seeds: Iterable[int], glyphs: Optional[list[np.ndarray]] = None
                ) -> list[SequenceSample]:
        src = self.source(glyphs)
        return [src.sample(s) for s in seeds]

    def val_seeds(self) -> range:
        start = self.values["data.val_seed"]
        return range(start, start + self.values["data.val_count"])
