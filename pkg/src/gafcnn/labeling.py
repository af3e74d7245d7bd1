"""Rule-based labelling of 10-bar windows with eight reversal patterns.

Window layout: bars 0-6 feed the trend slope, bars 7-9 host the pattern
(3-bar star/engulfing rules use all three, hammer-family rules only bar 9).
Body sizes are judged against ``ref_body``, the mean absolute real body of
bars 0-6.

Within one trend direction the four rule sets are disjoint by construction:

* star vs engulfing: the middle bar is short for a star and not short for
  an engulfing pair;
* star vs hammer family: the last body is long for a star, short for a hammer;
* engulfing vs hammer family: the last body is not short vs short;
* hammer vs inverted hammer: the dominant shadow differs.
"""
from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gafcnn.errors import FormatError, QuotaUnmet
from gafcnn.market import WINDOW, BarWindow, FeatureSet, as_arrays

SLOPE_BARS = 7
SPLITS = ("train", "validation", "test")


class PatternClass(enum.IntEnum):
    NoPattern = 0
    MorningStar = 1
    BullishEngulfing = 2
    Hammer = 3
    ShootingStar = 4
    EveningStar = 5
    BearishEngulfing = 6
    HangingMan = 7
    InvertedHammer = 8


N_CLASSES = len(PatternClass)


class TrendState(enum.IntEnum):
    # integer codes so trend arrays can be stored compactly
    NONE = 0
    UP = 1
    DOWN = -1


BULLISH = (PatternClass.MorningStar, PatternClass.BullishEngulfing,
           PatternClass.Hammer, PatternClass.InvertedHammer)
BEARISH = (PatternClass.EveningStar, PatternClass.BearishEngulfing,
           PatternClass.HangingMan, PatternClass.ShootingStar)
REQUIRED_TREND = {**{c: TrendState.DOWN for c in BULLISH}, **{c: TrendState.UP for c in BEARISH}}


@dataclass(frozen=True)
class LabelerConfig:
    buffer_size: int = 50
    percentile: float = 70.0
    long_body: float = 1.5
    short_body: float = 0.5
    shadow_ratio: float = 2.0
    opposite_shadow_ratio: float = 0.3
    # textbook engulfing (open at or beyond the previous close) instead of the
    # relaxed "open within half of the previous body" rule
    strict_engulfing: bool = False


# ---------------------------------------------------------------------------
# trend

_HALF = SLOPE_BARS // 2
_SLOPE_DENOM = float(sum(2 * i * i for i in range(1, _HALF + 1)))  # sum of (x - mean)^2 = 28


def _paired_slope(y: np.ndarray) -> np.ndarray:
    # OLS slope written as sum_i i * (y[c+i] - y[c-i]) / 28 around the centre c;
    # differences first, so a flat run gives exactly 0 rather than rounding noise
    c = _HALF
    acc = sum(i * (y[..., c + i] - y[..., c - i]) for i in range(1, _HALF + 1))
    return acc / _SLOPE_DENOM


def regression_slope(closes: Sequence[float]) -> float:
    """OLS slope of ``closes`` against indices 0..6."""
    y = np.asarray(closes, dtype=np.float64)
    if y.shape != (SLOPE_BARS,):
        raise ValueError(f"need exactly {SLOPE_BARS} closes")
    return float(_paired_slope(y))


def rolling_slopes(closes: np.ndarray) -> np.ndarray:
    """Slope of every 7-bar run; entry ``s`` covers ``closes[s:s+7]``."""
    return _paired_slope(sliding_window_view(np.asarray(closes, dtype=np.float64), SLOPE_BARS))


def nearest_rank(values, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    ordered = sorted(values)
    k = max(1, math.ceil(percentile * len(ordered) / 100 - 1e-9))
    return ordered[k - 1]


class SlopeTracker:
    """Sequential accumulator of recent positive and negative slopes.

    A slope confirms a trend when its sign's buffer is already full and the
    slope's magnitude strictly exceeds that buffer's percentile; the slope is
    recorded afterwards. Zero slopes are ignored.
    """

    def __init__(self, capacity: int = 50, percentile: float = 70.0):
        self.capacity = capacity
        self.percentile = percentile
        self.pos_slopes: deque[float] = deque(maxlen=capacity)
        self.neg_slopes: deque[float] = deque(maxlen=capacity)

    def update(self, slope: float) -> TrendState:
        if slope > 0:
            buf, state, mag = self.pos_slopes, TrendState.UP, slope
        elif slope < 0:
            buf, state, mag = self.neg_slopes, TrendState.DOWN, -slope
        else:
            return TrendState.NONE
        confirmed = len(buf) == self.capacity and mag > nearest_rank(map(abs, buf), self.percentile)
        buf.append(slope)
        return state if confirmed else TrendState.NONE


def update_trend(tracker: SlopeTracker, slope: float) -> TrendState:
    return tracker.update(slope)


def scan_trends(closes: np.ndarray, cfg: LabelerConfig = LabelerConfig()) -> np.ndarray:
    """Trend code for every window start, feeding one tracker in scan order."""
    closes = np.asarray(closes, dtype=np.float64)
    n_windows = len(closes) - WINDOW + 1
    if n_windows <= 0:
        return np.zeros(0, dtype=np.int8)
    slopes = rolling_slopes(closes[: n_windows + SLOPE_BARS - 1])
    tracker = SlopeTracker(cfg.buffer_size, cfg.percentile)
    update = tracker.update
    return np.fromiter((update(s) for s in slopes.tolist()), dtype=np.int8, count=n_windows)


# ---------------------------------------------------------------------------
# pattern rules

def shape_masks(ohlc_windows: np.ndarray, cfg: LabelerConfig = LabelerConfig()) -> dict[PatternClass, np.ndarray]:
    """Trend-free shape predicate of every pattern over ``(n, 10, 4)`` windows."""
    w = np.asarray(ohlc_windows, dtype=np.float64)
    o, h, l, c = (w[..., k] for k in range(4))
    body = c - o
    size = np.abs(body)
    upper = h - np.maximum(o, c)
    lower = np.minimum(o, c) - l
    ref = size[:, :SLOPE_BARS].mean(axis=1)

    long_ = size >= cfg.long_body * ref[:, None]
    short = size <= cfg.short_body * ref[:, None]
    white = body > 0
    black = body < 0
    b8, b9, b10 = 7, 8, 9
    mid8 = (o[:, b8] + c[:, b8]) / 2
    mid9 = (o[:, b9] + c[:, b9]) / 2

    morning = (black[:, b8] & long_[:, b8] & short[:, b9]
               & white[:, b10] & long_[:, b10] & (c[:, b10] > mid8))
    evening = (white[:, b8] & long_[:, b8] & short[:, b9]
               & black[:, b10] & long_[:, b10] & (c[:, b10] < mid8))

    if cfg.strict_engulfing:
        bull_open = o[:, b10] <= c[:, b9]
        bear_open = o[:, b10] >= c[:, b9]
    else:
        bull_open = o[:, b10] <= mid9
        bear_open = o[:, b10] >= mid9
    bull_engulf = (black[:, b9] & ~short[:, b9] & white[:, b10] & ~short[:, b10]
                   & bull_open & (c[:, b10] >= o[:, b9]))
    bear_engulf = (white[:, b9] & ~short[:, b9] & black[:, b10] & ~short[:, b10]
                   & bear_open & (c[:, b10] <= o[:, b9]))

    s10, u10, l10 = size[:, b10], upper[:, b10], lower[:, b10]
    hammer_shape = (short[:, b10] & (l10 >= cfg.shadow_ratio * s10)
                    & (u10 <= cfg.opposite_shadow_ratio * s10) & (l10 > u10))
    inverted_shape = (short[:, b10] & (u10 >= cfg.shadow_ratio * s10)
                      & (l10 <= cfg.opposite_shadow_ratio * s10) & (u10 > l10))

    return {
        PatternClass.MorningStar: morning,
        PatternClass.BullishEngulfing: bull_engulf,
        PatternClass.Hammer: hammer_shape,
        PatternClass.InvertedHammer: inverted_shape,
        PatternClass.EveningStar: evening,
        PatternClass.BearishEngulfing: bear_engulf,
        PatternClass.HangingMan: hammer_shape,
        PatternClass.ShootingStar: inverted_shape,
    }


def match_patterns(ohlc_windows: np.ndarray, trends, cfg: LabelerConfig = LabelerConfig()) -> np.ndarray:
    """Label ``(n, 10, 4)`` windows given their trend codes; returns int8 classes."""
    trends = np.broadcast_to(np.asarray(trends, dtype=np.int8), (len(ohlc_windows),))
    labels = np.zeros(len(ohlc_windows), dtype=np.int8)
    hits = np.zeros(len(ohlc_windows), dtype=np.int8)
    for cls, mask in shape_masks(ohlc_windows, cfg).items():
        m = mask & (trends == REQUIRED_TREND[cls])
        labels[m] = cls
        hits += m
    assert hits.max(initial=0) <= 1, "pattern rules overlap"
    return labels


def match_pattern(window: BarWindow, trend: TrendState, cfg: LabelerConfig = LabelerConfig()) -> PatternClass:
    return PatternClass(int(match_patterns(window.ohlc[None], [int(trend)], cfg)[0]))


def label_series(series, cfg: LabelerConfig = LabelerConfig()):
    """Scan every stride-1 window; returns ``(trends, labels)`` indexed by start."""
    _, ohlc = as_arrays(series)
    trends = scan_trends(ohlc[:, 3], cfg)
    if len(trends) == 0:
        return trends, np.zeros(0, dtype=np.int8)
    windows = sliding_window_view(ohlc, WINDOW, axis=0).transpose(0, 2, 1)
    return trends, match_patterns(windows, trends, cfg)


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class Quota:
    """Per-class window counts for each split (index = class)."""
    train: tuple[int, ...] = (0,) * N_CLASSES
    validation: tuple[int, ...] = (0,) * N_CLASSES
    test: tuple[int, ...] = (0,) * N_CLASSES

    def __post_init__(self):
        for name in SPLITS:
            counts = tuple(int(v) for v in getattr(self, name))
            if len(counts) != N_CLASSES or min(counts) < 0:
                raise ValueError(f"{name} quota needs {N_CLASSES} nonnegative counts")
            object.__setattr__(self, name, counts)

    @classmethod
    def from_totals(cls, train: int, validation: int, test: int, class0_weight: int = 2) -> "Quota":
        """Equal per-pattern shares with class 0 weighted ``class0_weight`` times.

        The training entry for class 0 is left at the base share; pass
        ``class0_train_multiplier=class0_weight`` to :func:`build_dataset` to
        reach the requested training total.
        """
        out = {}
        for name, total in zip(SPLITS, (train, validation, test)):
            share, rem = divmod(total, 8 + class0_weight)
            if rem:
                raise ValueError(f"{name} total {total} is not divisible by {8 + class0_weight}")
            zero = share if name == "train" else class0_weight * share
            out[name] = (zero,) + (share,) * 8
        return cls(**out)


SIM_QUOTA = Quota.from_totals(2000, 400, 500)
REAL_QUOTA = Quota.from_totals(1000, 200, 350)


@dataclass(frozen=True)
class LabeledWindow:
    start: int
    window: BarWindow
    label: PatternClass


@dataclass
class Dataset:
    train: list[LabeledWindow] = field(default_factory=list)
    validation: list[LabeledWindow] = field(default_factory=list)
    test: list[LabeledWindow] = field(default_factory=list)
    feature_set: FeatureSet = FeatureSet.CULR

    def split(self, name: str) -> list[LabeledWindow]:
        return getattr(self, name)

    def sizes(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def class_counts(self, name: str) -> list[int]:
        counts = [0] * N_CLASSES
        for lw in self.split(name):
            counts[lw.label] += 1
        return counts

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(n, 10, 4)`` OHLC windows and ``(n,)`` labels of one split."""
        rows = self.split(name)
        x = np.array([lw.window.ohlc for lw in rows], dtype=np.float64).reshape(-1, WINDOW, 4)
        y = np.array([int(lw.label) for lw in rows], dtype=np.int64)
        return x, y


def build_dataset(series, quota: Quota, class0_train_multiplier: int = 1, seed: int = 0,
                  cfg: LabelerConfig = LabelerConfig(),
                  feature_set: FeatureSet = FeatureSet.CULR) -> Dataset:
    """Label every window of ``series`` and draw the requested class quotas.

    Draws are without replacement per class, so the splits never share a
    window start.
    """
    ts, ohlc = as_arrays(series)
    needs = {name: list(getattr(quota, name)) for name in SPLITS}
    needs["train"][0] *= class0_train_multiplier
    total = [sum(needs[name][c] for name in SPLITS) for c in range(N_CLASSES)]
    if not any(total):
        return Dataset(feature_set=FeatureSet.parse(feature_set))

    if len(ohlc) >= WINDOW:
        _, labels = label_series((ts, ohlc), cfg)
    else:
        labels = np.zeros(0, dtype=np.int8)
    rng = np.random.default_rng(seed)
    chosen: dict[str, list[tuple[int, int]]] = {name: [] for name in SPLITS}
    for cls in range(N_CLASSES):
        if total[cls] == 0:
            continue
        candidates = np.flatnonzero(labels == cls)
        if len(candidates) < total[cls]:
            raise QuotaUnmet(PatternClass(cls), len(candidates), total[cls])
        picks = rng.choice(candidates, size=total[cls], replace=False)
        offset = 0
        for name in SPLITS:
            k = needs[name][cls]
            chosen[name].extend((int(s), cls) for s in picks[offset:offset + k])
            offset += k

    ds = Dataset(feature_set=FeatureSet.parse(feature_set))
    for name in SPLITS:
        for start, cls in sorted(chosen[name]):
            win = BarWindow.from_arrays(ts[start:start + WINDOW], ohlc[start:start + WINDOW])
            ds.split(name).append(LabeledWindow(start, win, PatternClass(cls)))
    return ds


# ---------------------------------------------------------------------------
# dataset file: JSON lines, one header object then one object per window

DATASET_FORMAT = "gafcnn-dataset"
DATASET_VERSION = 1


def dump_dataset(ds: Dataset) -> str:
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                         "feature_set": ds.feature_set.value})]
    for name in SPLITS:
        for lw in ds.split(name):
            bars = [[b.timestamp, b.open, b.high, b.low, b.close] for b in lw.window.bars]
            lines.append(json.dumps({"split": name, "start": lw.start, "label": int(lw.label), "bars": bars}))
    return "\n".join(lines) + "\n"


def load_dataset(text: str) -> Dataset:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise FormatError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise FormatError(f"unrecognised dataset header {header!r}")
    ds = Dataset(feature_set=FeatureSet.parse(header["feature_set"]))
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        if rec.get("split") not in SPLITS or len(rec.get("bars", ())) != WINDOW:
            raise FormatError(f"line {lineno}: malformed window record")
        bars = np.asarray(rec["bars"], dtype=np.float64)
        win = BarWindow.from_arrays(bars[:, 0].astype(np.int64), bars[:, 1:])
        ds.split(rec["split"]).append(LabeledWindow(int(rec["start"]), win, PatternClass(rec["label"])))
    return ds


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dump_dataset(ds), encoding="utf-8")


def read_dataset(path) -> Dataset:
    return load_dataset(Path(path).read_text(encoding="utf-8"))

