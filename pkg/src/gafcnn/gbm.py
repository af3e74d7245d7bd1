"""Geometric Brownian Motion tick paths aggregated into OHLC bars."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gafcnn.errors import ConfigError, LengthError
from gafcnn.market import OhlcBar, array_to_bars

MINUTE_OF_TRADING_YEAR = 1.0 / (252 * 390)


@dataclass(frozen=True)
class GbmParams:
    s0: float = 1.0
    mu: float = 0.05
    sigma: float = 0.2
    dt: float = MINUTE_OF_TRADING_YEAR
    ticks_per_bar: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.s0 > 0:
            raise ConfigError("s0 must be positive")
        if not self.sigma >= 0:
            raise ConfigError("sigma must be nonnegative")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if int(self.ticks_per_bar) < 1:
            raise ConfigError("ticks_per_bar must be >= 1")


def simulate_path(params: GbmParams, n_ticks: int, n_paths: int | None = None) -> np.ndarray:
    """Exact log-normal stepping from ``s0``; returns ``n_ticks + 1`` prices.

    With ``n_paths`` set, returns an ``(n_paths, n_ticks + 1)`` array instead.
    """
    rng = np.random.default_rng(params.seed)
    shape = (n_ticks,) if n_paths is None else (n_paths, n_ticks)
    z = rng.standard_normal(shape)
    drift = (params.mu - 0.5 * params.sigma ** 2) * params.dt
    log_inc = drift + params.sigma * np.sqrt(params.dt) * z
    log_path = np.concatenate([np.zeros(shape[:-1] + (1,)), np.cumsum(log_inc, axis=-1)], axis=-1)
    return params.s0 * np.exp(log_path)


def ticks_to_ohlc(ticks: np.ndarray, ticks_per_bar: int) -> np.ndarray:
    ticks = np.asarray(ticks, dtype=np.float64)
    if ticks_per_bar < 1 or len(ticks) % ticks_per_bar:
        raise LengthError(f"{len(ticks)} ticks do not split into bars of {ticks_per_bar}")
    chunks = ticks.reshape(-1, ticks_per_bar)
    return np.stack([chunks[:, 0], chunks.max(axis=1), chunks.min(axis=1), chunks[:, -1]], axis=1)


def ticks_to_bars(ticks, ticks_per_bar: int, t0: int = 0, bar_seconds: int = 60) -> list[OhlcBar]:
    ohlc = ticks_to_ohlc(ticks, ticks_per_bar)
    ts = t0 + bar_seconds * np.arange(len(ohlc), dtype=np.int64)
    return array_to_bars(ts, ohlc)


def simulate_bars(params: GbmParams, n_bars: int, t0: int = 0,
                  bar_seconds: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Simulate ``n_bars`` bars as ``(timestamps, ohlc)`` arrays.

    The leading ``s0`` tick is dropped so the tick count divides evenly.
    Bar spacing defaults to ``ticks_per_bar`` minutes.
    """
    tpb = int(params.ticks_per_bar)
    path = simulate_path(params, n_bars * tpb)[1:]
    ohlc = ticks_to_ohlc(path, tpb)
    if bar_seconds is None:
        bar_seconds = 60 * tpb
    ts = t0 + bar_seconds * np.arange(n_bars, dtype=np.int64)
    return ts, ohlc
