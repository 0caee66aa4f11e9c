"""Synthetic bouncing-glyph video, IDX digit ingestion and PGM frame I/O.

Sequences are generated from a per-sequence seed with a fixed integer
generator (``XorShift64Star``), so the same seed yields the same frames on
any platform. Glyphs move with constant speed and bounce elastically off
the frame walls; they are rasterised at the nearest integer offset and
composited with a per-pixel maximum.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError

_MASK64 = (1 << 64) - 1
IDX_IMAGE_MAGIC = 0x00000803


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* (Vigna 2014), seeded through one splitmix64 round.

    ``uniform`` draws 53-bit fractions, so results are exact and identical
    on every platform.
    """

    def __init__(self, seed: int):
        self.state = splitmix64(seed & _MASK64) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        return self.next_u64() % n


@dataclass(frozen=True)
class GlyphSprite:
    bitmap: np.ndarray
    position: tuple[float, float]  # (row, col) of the top-left corner
    velocity: tuple[float, float]  # (d_row, d_col) per frame


@dataclass
class SequenceSample:
    frames: list[np.ndarray]  # each (h, w, 1) in [0, 1]
    context_len: int
    predict_len: int
    seed: int

    def __post_init__(self):
        if len(self.frames) != self.context_len + self.predict_len:
            raise ConfigError(
                f"{len(self.frames)} frames != context {self.context_len} + "
                f"predict {self.predict_len}"
            )

    @property
    def context(self) -> list[np.ndarray]:
        return self.frames[:self.context_len]

    @property
    def targets(self) -> list[np.ndarray]:
        return self.frames[self.context_len:]


def _bounce(p: float, v: float, hi: float) -> tuple[float, float]:
    if hi <= 0.0:
        return 0.0, v  # glyph fills the frame along this axis
    p += v
    # repeated reflection handles speeds larger than the free range
    while p < 0.0 or p > hi:
        if p < 0.0:
            p = -p
        else:
            p = 2.0 * hi - p
        v = -v
    return p, v


def step_sprite(sprite: GlyphSprite, frame_size: int) -> GlyphSprite:
    """Advance one frame; position reflects about the wall and velocity flips."""
    g_r, g_c = sprite.bitmap.shape
    r, vr = _bounce(sprite.position[0], sprite.velocity[0], float(frame_size - g_r))
    c, vc = _bounce(sprite.position[1], sprite.velocity[1], float(frame_size - g_c))
    return GlyphSprite(sprite.bitmap, (r, c), (vr, vc))


def raster_offset(position: tuple[float, float]) -> tuple[int, int]:
    """Nearest integer offset, rounding halves up."""
    return int(math.floor(position[0] + 0.5)), int(math.floor(position[1] + 0.5))


def render_frame(sprites: Sequence[GlyphSprite], frame_size: int) -> np.ndarray:
    frame = np.zeros((frame_size, frame_size), dtype=np.float64)
    for s in sprites:
        r, c = raster_offset(s.position)
        gh, gw = s.bitmap.shape
        np.maximum(frame[r:r + gh, c:c + gw], s.bitmap, out=frame[r:r + gh, c:c + gw])
    return np.clip(frame, 0.0, 1.0)[:, :, None]


def render_sprites(sprites: Sequence[GlyphSprite], frame_size: int, seq_len: int
                   ) -> list[np.ndarray]:
    for s in sprites:
        gh, gw = s.bitmap.shape
        if gh > frame_size or gw > frame_size:
            raise ConfigError(f"glyph {s.bitmap.shape} larger than frame {frame_size}")
        r, c = s.position
        if not (0 <= r <= frame_size - gh and 0 <= c <= frame_size - gw):
            raise ConfigError(f"glyph position {s.position} outside the frame")
    frames = []
    sprites = list(sprites)
    for _ in range(seq_len):
        frames.append(render_frame(sprites, frame_size))
        sprites = [step_sprite(s, frame_size) for s in sprites]
    return frames


def gen_sequence(seed: int, num_glyphs: int, frame_size: int, seq_len: int,
                 glyph_source: Sequence[np.ndarray], *, context_len: Optional[int] = None,
                 speed_range: tuple[float, float] = (2.0, 5.0)) -> SequenceSample:
    """Generate one bouncing-glyph sequence.

    Each glyph is drawn from ``glyph_source`` and gets a uniform start
    position, a direction uniform on the circle and a speed uniform in
    ``speed_range`` (pixels per frame). ``context_len`` defaults to half of
    ``seq_len``.
    """
    if num_glyphs < 1:
        raise ConfigError("num_glyphs must be >= 1")
    if not glyph_source:
        raise ConfigError("glyph source is empty")
    if context_len is None:
        context_len = seq_len // 2
    if not 0 <= context_len <= seq_len:
        raise ConfigError(f"context_len {context_len} outside [0, {seq_len}]")
    lo, hi = speed_range
    if not 0 <= lo <= hi:
        raise ConfigError(f"bad speed range {speed_range}")
    rng = XorShift64Star(seed)
    sprites = []
    for _ in range(num_glyphs):
        bitmap = glyph_source[rng.randbelow(len(glyph_source))]
        gh, gw = bitmap.shape
        if gh >= frame_size or gw >= frame_size:
            raise ConfigError(f"glyph {bitmap.shape} does not fit a {frame_size} frame")
        pos = (rng.uniform(0.0, frame_size - gh), rng.uniform(0.0, frame_size - gw))
        theta = rng.uniform(0.0, 2.0 * math.pi)
        speed = rng.uniform(lo, hi)
        sprites.append(GlyphSprite(bitmap, pos, (speed * math.sin(theta), speed * math.cos(theta))))
    frames = render_sprites(sprites, frame_size, seq_len)
    return SequenceSample(frames, context_len, seq_len - context_len, seed)


def builtin_glyphs(size: int = 12) -> list[np.ndarray]:
    """Binary shapes: square, cross, diagonal bar, ring (in that order)."""
    if size < 4:
        raise ConfigError("builtin glyphs need size >= 4")
    yy, xx = np.mgrid[0:size, 0:size]
    square = np.ones((size, size))
    mid = size // 2
    bar = max(1, size // 6)
    cross = ((np.abs(yy - mid + 0.5) < bar) | (np.abs(xx - mid + 0.5) < bar)).astype(float)
    diag = (np.abs(yy - xx) <= bar // 2 + 0.5).astype(float)
    centre = (size - 1) / 2.0
    radius = np.hypot(yy - centre, xx - centre)
    ring = ((radius <= size / 2.0) & (radius >= size / 2.0 - bar - 0.5)).astype(float)
    return [square, cross, diag, ring]


def load_idx_images(path) -> list[np.ndarray]:
    """Read an IDX unsigned-byte image file (optionally gzipped) as [0, 1] bitmaps."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise FormatError(f"{path}: too short for an IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    need = n * rows * cols
    if len(data) - 16 < need:
        raise FormatError(f"{path}: payload truncated ({len(data) - 16} of {need} bytes)")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=16)
    images = pixels.reshape(n, rows, cols).astype(np.float64) / 255.0
    return list(images)


def to_bytes(frame: np.ndarray) -> np.ndarray:
    """[0, 1] values to uint8 via round-half-up of value * 255."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3:
        if f.shape[2] != 1:
            raise ConfigError("PGM frames must have one channel")
        f = f[:, :, 0]
    if f.size and (np.nanmin(f) < 0.0 or np.nanmax(f) > 1.0 or np.isnan(f).any()):
        raise ConfigError("frame values must lie in [0, 1]")
    return np.floor(f * 255.0 + 0.5).astype(np.uint8)


def write_pgm_bytes(pixels: np.ndarray, path) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_pgm(frame: np.ndarray, path) -> None:
    write_pgm_bytes(to_bytes(frame), path)


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def read_pgm_bytes(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if len(data) - offset < w * h:
        raise FormatError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`: an (h, w, 1) array in [0, 1]."""
    return (read_pgm_bytes(path).astype(np.float64) / 255.0)[:, :, None]


def write_sequence(frames: Sequence[np.ndarray], directory, prefix: str = "frame") -> list[str]:
    """One PGM per frame, named ``{prefix}_000.pgm`` and up."""
    os.makedirs(directory, exist_ok=True)
    width = max(3, len(str(len(frames) - 1)))
    paths = []
    for i, f in enumerate(frames):
        p = os.path.join(directory, f"{prefix}_{i:0{width}d}.pgm")
        write_pgm(f, p)
        paths.append(p)
    return paths
