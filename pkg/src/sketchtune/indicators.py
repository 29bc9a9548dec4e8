"""Market-trend indicators for the sketch and the nine per-asset state features."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

__all__ = [
    "IndicatorError",
    "WarmupError",
    "MarketFeatures",
    "StateFeatures",
    "STATE_FEATURE_NAMES",
    "DEFAULT_LOOKBACK",
    "STATE_WARMUP",
    "volatility",
    "downside_risk",
    "growth_rate",
    "market_features",
    "market_feature_matrix",
    "state_features",
    "ema",
    "state_feature_matrix",
]

DEFAULT_LOOKBACK = 14
# close_60_sma is the longest state window
STATE_WARMUP = 60


class IndicatorError(ValueError):
    pass


class WarmupError(IndicatorError):
    pass


def volatility(window: Sequence[float], G: int | None = None) -> float:
    """Population variance of the raw prices in the window."""
    x = np.asarray(window, dtype=float)
    if G is None:
        G = len(x)
    if G < 2 or len(x) != G:
        raise IndicatorError(f"volatility needs a window of G >= 2 prices, got len={len(x)} G={G}")
    mean = x.sum() / G
    return float(((x - mean) ** 2).sum() / G)


def downside_risk(window: Sequence[float]) -> float:
    """Root-mean-square shortfall of the prices that sit below the window mean.

    The mean is taken over the shortfall count ``n``, not the window length;
    with nothing below the mean the risk is 0.
    """
    x = np.asarray(window, dtype=float)
    if len(x) == 0:
        raise IndicatorError("downside_risk needs a non-empty window")
    mean = x.sum() / len(x)
    below = x[x < mean]
    if len(below) == 0:
        return 0.0
    return float(np.sqrt(((mean - below) ** 2).sum() / len(below)))


def growth_rate(start_price: float, end_price: float) -> float:
    """Fractional rise from ``start_price`` to ``end_price``, floored at 0."""
    if not start_price > 0:
        raise IndicatorError(f"growth_rate needs a positive start price, got {start_price}")
    if end_price <= start_price:
        return 0.0
    return float((end_price - start_price) / start_price)


@dataclass(frozen=True)
class MarketFeatures:
    vol: float
    dr: float
    gr: float
    t: int = 0
    g: int = DEFAULT_LOOKBACK

    def __post_init__(self):
        for name in ("vol", "dr", "gr"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise IndicatorError(f"{name} must be finite and >= 0, got {value}")

    def get(self, name: str) -> float:
        return getattr(self, name)


def market_features(
    closes: Sequence[float], t: int, g: int = DEFAULT_LOOKBACK, normalize: bool = False
) -> MarketFeatures:
    """Indicators over the ``g`` closes ending at index ``t`` (inclusive).

    With ``normalize`` the volatility is divided by the squared window mean
    and the downside risk by the mean, making both scale-free.
    """
    if g < 2:
        raise IndicatorError("lookback g must be > 1")
    if t < g - 1 or t >= len(closes):
        raise WarmupError(f"need {g} bars ending at t={t}, have {min(t + 1, len(closes))}")
    window = np.asarray(closes[t - g + 1 : t + 1], dtype=float)
    vol = volatility(window, g)
    dr = downside_risk(window)
    if normalize:
        mean = window.mean()
        vol, dr = vol / mean**2, dr / mean
    return MarketFeatures(vol, dr, growth_rate(window[0], window[-1]), t, g)


def market_feature_matrix(
    closes: Sequence[float], g: int = DEFAULT_LOOKBACK, normalize: bool = False
) -> np.ndarray:
    """Array of shape (len(closes), 3) of (vol, dr, gr); NaN rows before warm-up."""
    closes = np.asarray(closes, dtype=float)
    out = np.full((len(closes), 3), np.nan)
    for t in range(g - 1, len(closes)):
        f = market_features(closes, t, g, normalize)
        out[t] = (f.vol, f.dr, f.gr)
    return out


@dataclass(frozen=True)
class StateFeatures:
    macd: float
    macds: float
    boll_ub: float
    boll_lb: float
    rsi_30: float
    cci_30: float
    dx_30: float
    close_30_sma: float
    close_60_sma: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


STATE_FEATURE_NAMES = tuple(f.name for f in fields(StateFeatures))


def ema(x: np.ndarray, span: int) -> np.ndarray:
    """Recursive EMA seeded with the first value, alpha = 2 / (span + 1)."""
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x, dtype=float)
    out[0] = x[0]
    for i in range(1, len(x)):
        out[i] = alpha * x[i] + (1 - alpha) * out[i - 1]
    return out


def _rsi(closes: np.ndarray, n: int) -> float:
    diff = np.diff(closes[-(n + 1):])
    gain = diff[diff > 0].sum() / n
    loss = -diff[diff < 0].sum() / n
    if gain == 0 and loss == 0:
        return 50.0
    if loss == 0:
        return 100.0
    return float(100.0 - 100.0 / (1.0 + gain / loss))


def _cci(highs, lows, closes, n: int) -> float:
    tp = (highs[-n:] + lows[-n:] + closes[-n:]) / 3.0
    mean = tp.mean()
    mad = np.abs(tp - mean).mean()
    if mad == 0:
        return 0.0
    return float((tp[-1] - mean) / (0.015 * mad))


def _dx(highs, lows, closes, n: int) -> float:
    h, lo, c = highs[-(n + 1):], lows[-(n + 1):], closes[-(n + 1):]
    up = h[1:] - h[:-1]
    down = lo[:-1] - lo[1:]
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    tr = np.maximum.reduce([h[1:] - lo[1:], np.abs(h[1:] - c[:-1]), np.abs(lo[1:] - c[:-1])])
    tr_sum = tr.sum()
    if tr_sum == 0:
        return 0.0
    plus_di = 100.0 * plus_dm.sum() / tr_sum
    minus_di = 100.0 * minus_dm.sum() / tr_sum
    if plus_di + minus_di == 0:
        return 0.0
    return float(100.0 * abs(plus_di - minus_di) / (plus_di + minus_di))


def state_features(closes, t: int, highs=None, lows=None) -> StateFeatures:
    """The nine state indicators at index ``t`` using only bars ``0..t``.

    Accepts an ``AssetSeries`` or raw arrays; highs/lows default to the closes.
    MACD is EMA12 - EMA26 over the full history with a 9-bar signal line;
    Bollinger bands are the 20-bar mean +- 2 population std.
    """
    if hasattr(closes, "closes"):
        series = closes
        closes, highs, lows = series.closes, series.highs, series.lows
    closes = np.asarray(closes, dtype=float)
    highs = closes if highs is None else np.asarray(highs, dtype=float)
    lows = closes if lows is None else np.asarray(lows, dtype=float)
    if t < STATE_WARMUP - 1 or t >= len(closes):
        raise WarmupError(f"state features need {STATE_WARMUP} bars up to t={t}")
    c, h, lo = closes[: t + 1], highs[: t + 1], lows[: t + 1]

    macd_line = ema(c, 12) - ema(c, 26)
    signal = ema(macd_line, 9)
    last20 = c[-20:]
    mid, sd = last20.mean(), last20.std()
    return StateFeatures(
        macd=float(macd_line[-1]),
        macds=float(signal[-1]),
        boll_ub=float(mid + 2 * sd),
        boll_lb=float(mid - 2 * sd),
        rsi_30=_rsi(c, 30),
        cci_30=_cci(h, lo, c, 30),
        dx_30=_dx(h, lo, c, 30),
        close_30_sma=float(c[-30:].mean()),
        close_60_sma=float(c[-60:].mean()),
    )


def _rolling_sum(x: np.ndarray, n: int) -> np.ndarray:
    """Sum over the trailing ``n`` values; NaN where fewer are available."""
    out = np.full(len(x), np.nan)
    if len(x) >= n:
        out[n - 1:] = np.lib.stride_tricks.sliding_window_view(x, n).sum(axis=1)
    return out


def state_feature_matrix(closes, highs=None, lows=None) -> np.ndarray:
    """All nine state features for every bar, shape (n, 9); NaN before warm-up.

    Row ``t`` matches ``state_features(..., t)`` up to summation rounding.
    """
    if hasattr(closes, "closes"):
        series = closes
        closes, highs, lows = series.closes, series.highs, series.lows
    c = np.asarray(closes, dtype=float)
    h = c if highs is None else np.asarray(highs, dtype=float)
    lo = c if lows is None else np.asarray(lows, dtype=float)
    n = len(c)
    out = np.full((n, 9), np.nan)
    if n < STATE_WARMUP:
        return out

    macd_line = ema(c, 12) - ema(c, 26)
    signal = ema(macd_line, 9)
    windows20 = np.lib.stride_tricks.sliding_window_view(c, 20)
    mid = windows20.mean(axis=1)
    sd = windows20.std(axis=1)

    diff = np.diff(c, prepend=np.nan)
    gain = _rolling_sum(np.where(diff > 0, diff, 0.0), 30) / 30
    loss = _rolling_sum(np.where(diff < 0, -diff, 0.0), 30) / 30
    with np.errstate(divide="ignore", invalid="ignore"):
        rsi = np.where(loss == 0, np.where(gain == 0, 50.0, 100.0), 100.0 - 100.0 / (1.0 + gain / loss))

    tp = (h + lo + c) / 3.0
    tpw = np.lib.stride_tricks.sliding_window_view(tp, 30)
    tp_mean = tpw.mean(axis=1)
    mad = np.abs(tpw - tp_mean[:, None]).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cci = np.where(mad == 0, 0.0, (tp[29:] - tp_mean) / (0.015 * mad))

    up = np.concatenate([[0.0], h[1:] - h[:-1]])
    down = np.concatenate([[0.0], lo[:-1] - lo[1:]])
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    prev_c = np.concatenate([[c[0]], c[:-1]])
    tr = np.maximum.reduce([h - lo, np.abs(h - prev_c), np.abs(lo - prev_c)])
    plus_dm[0] = minus_dm[0] = tr[0] = 0.0
    tr_sum = _rolling_sum(tr, 30)
    with np.errstate(divide="ignore", invalid="ignore"):
        plus_di = 100.0 * _rolling_sum(plus_dm, 30) / tr_sum
        minus_di = 100.0 * _rolling_sum(minus_dm, 30) / tr_sum
        dx = 100.0 * np.abs(plus_di - minus_di) / (plus_di + minus_di)
    dx = np.where((tr_sum == 0) | (plus_di + minus_di == 0), 0.0, dx)

    sma30 = np.lib.stride_tricks.sliding_window_view(c, 30).mean(axis=1)
    sma60 = np.lib.stride_tricks.sliding_window_view(c, 60).mean(axis=1)

    t = np.arange(STATE_WARMUP - 1, n)
    out[t, 0] = macd_line[t]
    out[t, 1] = signal[t]
    out[t, 2] = mid[t - 19] + 2 * sd[t - 19]
    out[t, 3] = mid[t - 19] - 2 * sd[t - 19]
    out[t, 4] = rsi[t]
    out[t, 5] = cci[t - 29]
    out[t, 6] = dx[t]
    out[t, 7] = sma30[t - 29]
    out[t, 8] = sma60[t - 59]
    return out
