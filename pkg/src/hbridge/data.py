"""Synthetic caption -> pattern task.

Captions are six tokens ``[BOS, shape, color, quadrant, size, EOS]`` over a
16-symbol vocabulary; patterns are 16x16x3 arrays in [-1, 1] with one glyph
drawn on a constant background. The closed world has 4*4*4*2 = 128 classes,
so generated samples can be scored by exhaustive nearest-neighbour decoding.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, InputError

BOS, EOS = 0, 1
SHAPE_BASE, COLOR_BASE, QUADRANT_BASE, SIZE_BASE = 2, 6, 10, 14
VOCAB_SIZE = 16
CAPTION_LEN = 6

N_SHAPES, N_COLORS, N_QUADRANTS, N_SIZES = 4, 4, 4, 2
SHAPES = ("square", "disc", "triangle", "cross")
COLORS = ("red", "green", "blue", "white")

IMAGE_SIZE = 16
CHANNELS = 3
PATCH = 4
GRID = IMAGE_SIZE // PATCH
PATCH_DIM = PATCH * PATCH * CHANNELS

BACKGROUND = -1.0
COLOR_VALUES = np.array(
    [[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0], [1.0, 1.0, 1.0]]
)
GLYPH_PIXELS = (6, 8)  # small, large; a quadrant is 8x8

ALL_TUPLES: tuple[tuple[int, int, int, int], ...] = tuple(
    itertools.product(range(N_SHAPES), range(N_COLORS), range(N_QUADRANTS), range(N_SIZES))
)

DATASET_MAGIC = b"HBDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
RECORD_DTYPE = np.dtype([("tokens", "<u2", (CAPTION_LEN,)), ("pattern", "<f4", (IMAGE_SIZE * IMAGE_SIZE * CHANNELS,))])


def _glyph_mask(shape: int, n: int) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n * 2 - 1
    v, u = np.meshgrid(c, c, indexing="ij")
    if shape == 0:
        return np.ones((n, n), dtype=bool)
    if shape == 1:
        return u * u + v * v <= 0.8
    if shape == 2:
        return np.abs(u) <= (v + 1) / 2 + 1e-9
    return (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)


def _check_tuple(shape: int, color: int, quadrant: int, size: int) -> None:
    for name, value, hi in (
        ("shape", shape, N_SHAPES),
        ("color", color, N_COLORS),
        ("quadrant", quadrant, N_QUADRANTS),
        ("size", size, N_SIZES),
    ):
        if not 0 <= int(value) < hi:
            raise InputError(f"{name} must be in [0, {hi}), got {value}")


def render(shape: int, color: int, quadrant: int, size: int) -> np.ndarray:
    """Draw one glyph; returns a fresh float64 array of shape (16, 16, 3)."""
    _check_tuple(shape, color, quadrant, size)
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, CHANNELS), BACKGROUND)
    n = GLYPH_PIXELS[size]
    off = (IMAGE_SIZE // 2 - n) // 2
    r0 = (quadrant // 2) * (IMAGE_SIZE // 2) + off
    c0 = (quadrant % 2) * (IMAGE_SIZE // 2) + off
    region = img[r0 : r0 + n, c0 : c0 + n]
    region[_glyph_mask(shape, n)] = COLOR_VALUES[color]
    return img


@lru_cache(maxsize=1)
def reference_renders() -> np.ndarray:
    """All 128 renders stacked in tuple-index order, shape (128, 16, 16, 3)."""
    refs = np.stack([render(*t) for t in ALL_TUPLES])
    refs.setflags(write=False)
    return refs


@lru_cache(maxsize=1)
def latent_mean() -> np.ndarray:
    """Per-dimension mean of the patchified reference set, shape (48,)."""
    return patchify(reference_renders()).mean(axis=(0, 1))


def caption_tokens(shape: int, color: int, quadrant: int, size: int) -> list[int]:
    _check_tuple(shape, color, quadrant, size)
    return [BOS, SHAPE_BASE + shape, COLOR_BASE + color, QUADRANT_BASE + quadrant, SIZE_BASE + size, EOS]


def parse_caption(tokens) -> tuple[int, int, int, int]:
    t = [int(x) for x in tokens]
    if len(t) != CAPTION_LEN or t[0] != BOS or t[-1] != EOS:
        raise InputError(f"malformed caption tokens {t}")
    out = (t[1] - SHAPE_BASE, t[2] - COLOR_BASE, t[3] - QUADRANT_BASE, t[4] - SIZE_BASE)
    _check_tuple(*out)
    return out


def tuple_index(shape: int, color: int, quadrant: int, size: int) -> int:
    return ((shape * N_COLORS + color) * N_QUADRANTS + quadrant) * N_SIZES + size


def patchify(pattern: np.ndarray) -> np.ndarray:
    """(..., 16, 16, 3) -> (..., 16, 48): row-major 4x4 patches, channels interleaved per pixel."""
    lead = pattern.shape[:-3]
    x = pattern.reshape(*lead, GRID, PATCH, GRID, PATCH, CHANNELS)
    x = np.moveaxis(x, -4, -3)  # (..., gy, gx, py, px, c)
    return x.reshape(*lead, GRID * GRID, PATCH_DIM)


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    lead = tokens.shape[:-2]
    x = tokens.reshape(*lead, GRID, GRID, PATCH, PATCH, CHANNELS)
    x = np.moveaxis(x, -3, -4)  # (..., gy, py, gx, px, c)
    return x.reshape(*lead, IMAGE_SIZE, IMAGE_SIZE, CHANNELS)


def decode_attributes(pattern: np.ndarray) -> tuple[int, int, int, int]:
    """Nearest reference render under MSE; ties go to the lowest tuple index."""
    pattern = np.asarray(pattern, dtype=np.float64)
    if pattern.shape != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS):
        raise InputError(f"pattern must be 16x16x3, got {pattern.shape}")
    d = ((reference_renders() - pattern) ** 2).mean(axis=(1, 2, 3))
    return ALL_TUPLES[int(np.argmin(d))]


def decode_batch(patterns: np.ndarray) -> np.ndarray:
    """Vectorized decode; returns tuple indices, shape (B,)."""
    refs = reference_renders().reshape(len(ALL_TUPLES), -1)
    flat = np.asarray(patterns, dtype=np.float64).reshape(len(patterns), -1)
    d = ((flat[:, None, :] - refs[None]) ** 2).mean(axis=-1)
    return d.argmin(axis=1)


@dataclass
class Dataset:
    tokens: np.ndarray  # (n, 6) int64
    patterns: np.ndarray  # (n, 16, 16, 3) float32

    def __len__(self) -> int:
        return len(self.tokens)

    def attributes(self) -> np.ndarray:
        return np.array([parse_caption(t) for t in self.tokens], dtype=np.int64).reshape(-1, 4)


def sample_dataset(n: int, seed: int) -> Dataset:
    if n < 0:
        raise InputError("n must be non-negative")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(ALL_TUPLES), size=n)
    tokens = np.array([caption_tokens(*ALL_TUPLES[i]) for i in idx], dtype=np.int64).reshape(n, CAPTION_LEN)
    patterns = reference_renders()[idx].astype(np.float32)
    return Dataset(tokens, patterns)


def write_dataset(ds: Dataset, path: str | Path) -> None:
    rec = np.zeros(len(ds), dtype=RECORD_DTYPE)
    rec["tokens"] = ds.tokens
    rec["pattern"] = np.asarray(ds.patterns, dtype=np.float32).reshape(len(ds), IMAGE_SIZE * IMAGE_SIZE * CHANNELS)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds)))
        fh.write(rec.tobytes())
    tmp.replace(path)


def make_dataset(n: int, seed: int, path: str | Path) -> Dataset:
    ds = sample_dataset(n, seed)
    write_dataset(ds, path)
    return ds


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    body = raw[_HEADER.size :]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise DatasetFormatError(f"{path}: expected {count} records, payload has {len(body)} bytes")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE, count=count)
    tokens = rec["tokens"].astype(np.int64)
    patterns = rec["pattern"].reshape(count, IMAGE_SIZE, IMAGE_SIZE, CHANNELS).copy()
    return Dataset(tokens, patterns)
