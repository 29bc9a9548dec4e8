"""Rule-based reference strategies."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import FEE_RATE, Portfolio
from .market_data import AssetSeries
from .metrics import EquityCurve, STMetrics, st_metrics

__all__ = ["Schedule", "twap_schedule", "vwap_schedule", "buy_and_hold", "BuyAndHold", "index_tracking"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Per-step allocation fractions summing to 1."""

    fractions: np.ndarray
    name: str = "schedule"
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        a = np.asarray(self.fractions, dtype=float)
        if a.ndim != 1 or len(a) == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
            raise ValueError(f"fractions must be >= 0 and sum to 1, got sum {a.sum()}")
        a.setflags(write=False)
        object.__setattr__(self, "fractions", a)

    @property
    def policy_id(self) -> str:
        return self.name

    @property
    def T(self) -> int:
        return len(self.fractions)


def twap_schedule(T: int) -> Schedule:
    if T < 1:
        raise ValueError("TWAP needs T >= 1")
    return Schedule(np.full(T, 1.0 / T), "twap")


def vwap_schedule(volume_profiles: Sequence[Sequence[float]], T: int | None = None) -> Schedule:
    """Allocate in proportion to the slot-wise mean of historical intraday volumes.

    ``volume_profiles`` is one row per past day. An all-zero history falls
    back to TWAP and records a warning on the schedule.
    """
    v = np.atleast_2d(np.asarray(volume_profiles, dtype=float))
    if v.size == 0:
        raise ValueError("VWAP needs at least one historical day")
    if T is not None and v.shape[1] != T:
        raise ValueError(f"volume profiles have {v.shape[1]} slots, expected {T}")
    profile = v.mean(axis=0)
    total = profile.sum()
    if not total > 0:
        msg = "all historical volumes are zero; falling back to TWAP"
        log.warning(msg)
        return Schedule(np.full(v.shape[1], 1.0 / v.shape[1]), "vwap", (msg,))
    a = profile / total
    a[-1] = 1.0 - a[:-1].sum()
    return Schedule(np.clip(a, 0.0, None), "vwap")


@dataclass
class BuyAndHold:
    timestamps: np.ndarray
    values: np.ndarray
    initial: Portfolio
    fees_paid: float

    def curve(self, periods_per_year: float = 252) -> EquityCurve:
        return EquityCurve(self.timestamps, self.values, periods_per_year)


def buy_and_hold(prices, capital: float, weights=None, fee_rate: float = FEE_RATE,
                 quantity_decimals: int | None = None, timestamps=None) -> BuyAndHold:
    """Spend ``capital`` across assets at the first row of ``prices`` (T x D)
    and hold. Shares are fractional unless ``quantity_decimals`` is given."""
    p = np.asarray(prices, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    D = p.shape[1]
    if capital <= 0:
        raise ValueError("capital must be positive")
    w = np.full(D, 1.0 / D) if weights is None else np.asarray(weights, dtype=float)
    budget = capital * w
    shares = budget / (p[0] * (1.0 + fee_rate))
    if quantity_decimals is not None:
        scale = 10.0**quantity_decimals
        shares = np.floor(shares * scale) / scale
    gross = shares * p[0]
    fees = fee_rate * gross
    cash = capital - float(gross.sum() + fees.sum())
    pf = Portfolio(cash, shares)
    values = cash + p @ shares
    ts = np.arange(len(p)) if timestamps is None else np.asarray(timestamps)
    return BuyAndHold(ts, values, pf, float(fees.sum()))


def index_tracking(index: AssetSeries, periods_per_year: float = 252) -> STMetrics:
    """Metrics of holding the index itself, with no simulated trades."""
    return st_metrics(EquityCurve(index.timestamps, index.closes, periods_per_year))
