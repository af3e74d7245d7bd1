"""Gramian Angular Summation Field encoding of short price series."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gafcnn.errors import DomainError
from gafcnn.market import BarWindow, FeatureSet, channels_array

# Value assigned to every point of a constant series, where min-max scaling is 0/0.
CONSTANT_SERIES_VALUE = 0.5


@dataclass(frozen=True)
class NormalizedSeries:
    values: np.ndarray
    original_min: float = 0.0
    original_max: float = 1.0


@dataclass(frozen=True)
class PolarSeries:
    angles: np.ndarray
    radii: np.ndarray


def minmax_normalize(series) -> NormalizedSeries:
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalise an empty series")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        values = np.full(x.shape, CONSTANT_SERIES_VALUE)
    else:
        values = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return NormalizedSeries(values, lo, hi)


def _check_unit(values: np.ndarray) -> None:
    if np.any(~np.isfinite(values)) or np.any(values < 0) or np.any(values > 1):
        raise DomainError("normalised values must lie in [0, 1]")


def to_polar(ns: NormalizedSeries) -> PolarSeries:
    values = np.asarray(ns.values, dtype=np.float64)
    _check_unit(values)
    n = len(values)
    return PolarSeries(np.arccos(values), np.arange(1, n + 1) / n)


def gasf(ns: NormalizedSeries) -> np.ndarray:
    """cos(phi_i + phi_j) for every pair; exactly symmetric."""
    phi = to_polar(ns).angles
    g = np.cos(phi[:, None] + phi[None, :])
    # floating addition commutes, but mirror the upper triangle anyway
    return np.triu(g) + np.triu(g, 1).T


def gasf_algebraic(ns: NormalizedSeries) -> np.ndarray:
    """Same field via x x^T - sqrt(1 - x^2) sqrt(1 - x^2)^T."""
    x = np.asarray(ns.values, dtype=np.float64)
    _check_unit(x)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    return np.outer(x, x) - np.outer(s, s)


def reconstruct_diagonal(g: np.ndarray) -> NormalizedSeries:
    d = np.diagonal(np.asarray(g, dtype=np.float64))
    if np.any(d < -1) or np.any(d > 1):
        raise DomainError("GASF diagonal must lie in [-1, 1]")
    return NormalizedSeries(np.sqrt((d + 1.0) / 2.0))


def normalize_batch(series: np.ndarray) -> np.ndarray:
    """Min-max scale the last axis of ``series`` (constant rows map to 0.5)."""
    x = np.asarray(series, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (x - lo) / np.where(flat, 1.0, span)
    out = np.where(flat, CONSTANT_SERIES_VALUE, out)
    return np.clip(out, 0.0, 1.0)


def gasf_batch(normalized: np.ndarray) -> np.ndarray:
    """``(..., n)`` values in [0, 1] -> ``(..., n, n)`` fields."""
    phi = np.arccos(normalized)
    g = np.cos(phi[..., :, None] + phi[..., None, :])
    return np.triu(g) + np.swapaxes(np.triu(g, 1), -1, -2)


def encode_windows(ohlc_windows: np.ndarray, fs: FeatureSet) -> np.ndarray:
    """``(n, 10, 4)`` OHLC windows -> ``(n, 10, 10, 4)`` channel-last GASF tensors."""
    channels = channels_array(np.asarray(ohlc_windows, dtype=np.float64), fs)
    fields = gasf_batch(normalize_batch(channels))
    return np.moveaxis(fields, 1, -1)


def encode_window(window: BarWindow, fs: FeatureSet) -> np.ndarray:
    return encode_windows(window.ohlc[None], fs)[0]


# ---------------------------------------------------------------------------
# PGM preview

def export_pgm(g: np.ndarray) -> bytes:
    """Binary 8-bit greyscale PGM; -1 maps to 0 and +1 to 255 (round half up)."""
    g = np.asarray(g, dtype=np.float64)
    rows, cols = g.shape
    pixels = np.floor(255.0 * (np.clip(g, -1.0, 1.0) + 1.0) / 2.0 + 0.5).astype(np.uint8)
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Decode the P5 layout written by :func:`export_pgm` into uint8 pixels."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DomainError("not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise DomainError("only 8-bit PGM is supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)


def write_pgm(g: np.ndarray, path) -> None:
    Path(path).write_bytes(export_pgm(g))
