"""Order-execution and stock-trading performance metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "NoDataError",
    "EquityCurve",
    "OEOrderResult",
    "OEMetrics",
    "STMetrics",
    "price_advantage",
    "additional_annualized_return",
    "gain_loss_ratio",
    "positive_rate",
    "max_drawdown",
    "sharpe_ratio",
    "st_metrics",
    "oe_metrics",
    "PERIODS_DAILY",
    "PERIODS_8H",
]

PERIODS_DAILY = 252
PERIODS_8H = 3 * 365


class NoDataError(ValueError):
    pass


@dataclass(frozen=True)
class OEOrderResult:
    order_id: str
    achieved_price: float
    baseline_price: float
    side: str = "sell"

    def __post_init__(self):
        if not self.baseline_price > 0:
            raise ValueError("baseline price must be positive")

    @property
    def pa(self) -> float:
        """Per-order price advantage in basis points (sign-flipped for buys)."""
        rel = self.achieved_price / self.baseline_price - 1.0
        return 1e4 * (-rel if self.side == "buy" else rel)


def _pas(results) -> np.ndarray:
    values = [r.pa if isinstance(r, OEOrderResult) else float(r) for r in results]
    if not values:
        raise NoDataError("no orders")
    return np.asarray(values, dtype=float)


def price_advantage(results: Sequence[OEOrderResult | float]) -> float:
    return float(_pas(results).mean())


def additional_annualized_return(pa: float, periods_per_year: float = PERIODS_DAILY) -> float:
    """Daily price advantage (BPs) compounded over a trading year."""
    return float((1.0 + pa * 1e-4) ** periods_per_year - 1.0)


def gain_loss_ratio(results) -> float:
    """Mean winning PA over the magnitude of the mean losing PA.

    No losers gives ``inf``; no winners gives 0.
    """
    pa = _pas(results)
    wins, losses = pa[pa > 0], pa[pa < 0]
    if len(wins) == 0:
        return 0.0
    if len(losses) == 0:
        return math.inf
    return float(wins.mean() / abs(losses.mean()))


def positive_rate(results) -> float:
    pa = _pas(results)
    return float(np.count_nonzero(pa > 0) / len(pa))


@dataclass(frozen=True)
class EquityCurve:
    timestamps: np.ndarray
    values: np.ndarray
    periods_per_year: float = PERIODS_DAILY

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        ts = np.asarray(self.timestamps)
        if len(v) != len(ts):
            raise ValueError("timestamps and values differ in length")
        if np.any(v <= 0):
            raise ValueError("equity values must be positive")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must increase")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "timestamps", ts)

    @property
    def returns(self) -> np.ndarray:
        return self.values[1:] / self.values[:-1] - 1.0


def max_drawdown(values) -> float:
    """Most negative ``V_t / running_peak - 1`` (0 for a curve that never dips)."""
    v = np.asarray(values, dtype=float)
    peak = np.maximum.accumulate(v)
    return float(min(0.0, (v / peak - 1.0).min()))


def sharpe_ratio(returns, periods_per_year: float = PERIODS_DAILY, risk_free_rate: float = 0.0) -> float:
    """Annualised mean excess return over return std; NaN when the std is 0."""
    r = np.asarray(returns, dtype=float)
    if len(r) < 2:
        return math.nan
    excess = r - risk_free_rate / periods_per_year
    sd = r.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        return math.nan
    return float(excess.mean() / sd * math.sqrt(periods_per_year))


@dataclass(frozen=True)
class OEMetrics:
    PA: float
    ARR: float
    GLR: float
    POS: float
    n_orders: int

    flavor = "oe"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class STMetrics:
    AR: float
    CR: float
    AV: float
    MD: float
    SR: float
    n_periods: int

    flavor = "st"

    def to_dict(self) -> dict:
        return asdict(self)


def oe_metrics(results: Sequence[OEOrderResult], periods_per_year: float = PERIODS_DAILY) -> OEMetrics:
    pa = price_advantage(results)
    return OEMetrics(
        PA=pa,
        ARR=additional_annualized_return(pa, periods_per_year),
        GLR=gain_loss_ratio(results),
        POS=positive_rate(results),
        n_orders=len(results),
    )


def st_metrics(curve: EquityCurve, risk_free_rate: float = 0.0) -> STMetrics:
    """CR, compounded AR, annualised volatility (sample std), MD and SR from
    simple per-period returns."""
    v = curve.values
    if len(v) < 2:
        raise NoDataError("need at least 2 equity samples")
    n = len(v) - 1
    ppy = curve.periods_per_year
    r = curve.returns
    cr = float(v[-1] / v[0] - 1.0)
    with np.errstate(over="ignore"):
        ar = float(np.power(1.0 + cr, ppy / n) - 1.0)  # inf for explosive short curves
    sd = float(r.std(ddof=1)) if n > 1 else 0.0
    return STMetrics(
        AR=ar,
        CR=cr,
        AV=sd * math.sqrt(ppy),
        MD=max_drawdown(v),
        SR=sharpe_ratio(r, ppy, risk_free_rate),
        n_periods=n,
    )
