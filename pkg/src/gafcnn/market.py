"""OHLC bars: CSV ingestion, CULR decomposition, windowing and channel extraction.

Bulk paths work on plain arrays: ``timestamps`` (n,) int64 and ``ohlc`` (n, 4)
float64 with columns open, high, low, close. ``OhlcBar``/``BarWindow`` are the
per-record types used at API boundaries.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from gafcnn.errors import DuplicateBarError, InsufficientData, InvariantError, ParseError

logger = logging.getLogger(__name__)

WINDOW = 10
CSV_HEADER = "timestamp,open,high,low,close"


class FeatureSet(enum.Enum):
    OHLC = "OHLC"
    CULR = "CULR"

    @classmethod
    def parse(cls, value: "str | FeatureSet") -> "FeatureSet":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


@dataclass(frozen=True)
class OhlcBar:
    timestamp: int
    open: float
    high: float
    low: float
    close: float

    def violation(self) -> str | None:
        """Return a description of the first broken invariant, or None."""
        if min(self.open, self.high, self.low, self.close) <= 0:
            return "prices must be strictly positive"
        if self.low > min(self.open, self.close):
            return "low above min(open, close)"
        if self.high < max(self.open, self.close):
            return "high below max(open, close)"
        return None


@dataclass(frozen=True)
class CulrBar:
    close: float
    upper_shadow: float
    lower_shadow: float
    real_body: float

    def to_ohlc(self, timestamp: int = 0) -> OhlcBar:
        # exact inverse of to_culr whenever open and close are within a factor 2
        # of each other (Sterbenz), which holds for any realistic single bar
        open_ = self.close - self.real_body
        top = max(open_, self.close)
        bottom = min(open_, self.close)
        return OhlcBar(timestamp, open_, top + self.upper_shadow, bottom - self.lower_shadow, self.close)


@dataclass(frozen=True)
class BarWindow:
    bars: tuple[OhlcBar, ...]

    def __post_init__(self):
        if len(self.bars) != WINDOW:
            raise InsufficientData(f"window needs exactly {WINDOW} bars, got {len(self.bars)}")
        ts = [b.timestamp for b in self.bars]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvariantError(0, "window timestamps must be strictly increasing")

    @property
    def ohlc(self) -> np.ndarray:
        return np.array([[b.open, b.high, b.low, b.close] for b in self.bars], dtype=np.float64)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([b.timestamp for b in self.bars], dtype=np.int64)

    @classmethod
    def from_arrays(cls, timestamps, ohlc) -> "BarWindow":
        return cls(tuple(array_to_bars(timestamps, ohlc)))


def bars_to_arrays(bars: Sequence[OhlcBar]) -> tuple[np.ndarray, np.ndarray]:
    ts = np.array([b.timestamp for b in bars], dtype=np.int64)
    ohlc = np.array([[b.open, b.high, b.low, b.close] for b in bars], dtype=np.float64).reshape(-1, 4)
    return ts, ohlc


def array_to_bars(timestamps, ohlc) -> list[OhlcBar]:
    return [OhlcBar(int(t), float(o), float(h), float(l), float(c))
            for t, (o, h, l, c) in zip(timestamps, np.asarray(ohlc))]


def as_arrays(series) -> tuple[np.ndarray, np.ndarray]:
    """Accept a bar list or a ``(timestamps, ohlc)`` pair and return arrays."""
    if isinstance(series, tuple) and len(series) == 2 and isinstance(series[1], np.ndarray):
        return np.asarray(series[0], dtype=np.int64), np.asarray(series[1], dtype=np.float64)
    return bars_to_arrays(series)


# ---------------------------------------------------------------------------
# CSV

def _is_number(field: str) -> bool:
    try:
        float(field)
    except ValueError:
        return False
    return True


def parse_csv_arrays(text: str | Iterable[str]) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``timestamp,open,high,low,close`` records into sorted arrays.

    A first line whose first field is non-numeric is treated as a header.
    Out-of-order rows are sorted (the number of displaced rows is logged);
    repeated timestamps are rejected.
    """
    lines = text.splitlines() if isinstance(text, str) else (l.rstrip("\r\n") for l in text)
    ts: list[int] = []
    rows: list[tuple[float, float, float, float]] = []
    line_of: list[int] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if lineno == 1 and not _is_number(fields[0]):
            continue
        if len(fields) != 5:
            raise ParseError(lineno, f"expected 5 fields, got {len(fields)}")
        try:
            t = int(fields[0])
        except ValueError:
            raise ParseError(lineno, f"timestamp {fields[0]!r} is not an integer") from None
        try:
            o, h, l, c = (float(f) for f in fields[1:])
        except ValueError:
            raise ParseError(lineno, "non-numeric price field") from None
        if not all(np.isfinite((o, h, l, c))):
            raise ParseError(lineno, "non-finite price field")
        problem = OhlcBar(t, o, h, l, c).violation()
        if problem:
            raise InvariantError(lineno, problem)
        ts.append(t)
        rows.append((o, h, l, c))
        line_of.append(lineno)

    t_arr = np.array(ts, dtype=np.int64)
    ohlc = np.array(rows, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(t_arr, kind="stable")
    displaced = int(np.count_nonzero(order != np.arange(len(order))))
    if displaced:
        logger.warning("sorted %d out-of-order rows by timestamp", displaced)
    t_arr, ohlc = t_arr[order], ohlc[order]
    dup = np.flatnonzero(np.diff(t_arr) == 0)
    if dup.size:
        i = order[dup[0] + 1]
        raise DuplicateBarError(line_of[i], int(t_arr[dup[0]]))
    return t_arr, ohlc


def parse_csv(text: str | Iterable[str]) -> list[OhlcBar]:
    return array_to_bars(*parse_csv_arrays(text))


def format_csv(timestamps, ohlc, header: bool = True) -> str:
    out = [CSV_HEADER] if header else []
    for t, row in zip(timestamps, np.asarray(ohlc, dtype=np.float64).tolist()):
        out.append(f"{int(t)}," + ",".join(repr(v) for v in row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# features

def to_culr(bar: OhlcBar) -> CulrBar:
    top = max(bar.open, bar.close)
    bottom = min(bar.open, bar.close)
    return CulrBar(bar.close, bar.high - top, bottom - bar.low, bar.close - bar.open)


def culr_array(ohlc: np.ndarray) -> np.ndarray:
    """Vectorised :func:`to_culr`: ``(..., 4)`` OHLC -> ``(..., 4)`` close/upper/lower/body."""
    o, h, l, c = np.moveaxis(np.asarray(ohlc, dtype=np.float64), -1, 0)
    top = np.maximum(o, c)
    bottom = np.minimum(o, c)
    return np.stack([c, h - top, bottom - l, c - o], axis=-1)


def sliding_windows(series: Sequence[OhlcBar], stride: int = 1) -> list[BarWindow]:
    if stride < 1:
        raise ValueError("stride must be positive")
    n = len(series)
    if n < WINDOW:
        raise InsufficientData(f"need at least {WINDOW} bars, got {n}")
    return [BarWindow(tuple(series[s:s + WINDOW])) for s in range(0, n - WINDOW + 1, stride)]


def window_starts(n_bars: int, stride: int = 1) -> np.ndarray:
    if n_bars < WINDOW:
        raise InsufficientData(f"need at least {WINDOW} bars, got {n_bars}")
    return np.arange(0, n_bars - WINDOW + 1, stride)


def channels_array(ohlc_windows: np.ndarray, fs: FeatureSet) -> np.ndarray:
    """``(n, 10, 4)`` OHLC windows -> ``(n, 4, 10)`` feature channels."""
    fs = FeatureSet.parse(fs)
    feats = ohlc_windows if fs is FeatureSet.OHLC else culr_array(ohlc_windows)
    return np.swapaxes(np.asarray(feats, dtype=np.float64), -1, -2)


def channel_series(window: BarWindow, fs: FeatureSet) -> np.ndarray:
    """Four length-10 series in fixed order: OHLC -> (o, h, l, c); CULR -> (c, u, l, body)."""
    return channels_array(window.ohlc[None], fs)[0]
