"""Bar-driven trading environments.

Order execution (OE): sell or buy ``Q`` shares over ``T`` steps. The action
at step ``t`` (0-based) is a fraction ``a_t`` of ``Q`` executed at the next
price ``prices[t]``; fractions live on the grid ``{0, 1/T, 2/T, ...}`` and are
tracked as integer units of ``1/T`` so uniform schedules are exact.

Stock trading (ST): integer (or 6-decimal crypto) share trades over ``D``
assets with proportional fees, no shorting, and optional 1:1 margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .indicators import (
    DEFAULT_LOOKBACK,
    STATE_WARMUP,
    MarketFeatures,
    WarmupError,
    market_feature_matrix,
    market_features,
    state_feature_matrix,
)
from .market_data import AssetSeries
from .policy import Observation
from .sketch import TrendLabel

__all__ = [
    "EnvError",
    "AllocationError",
    "MarginCallError",
    "OrderTask",
    "OEStepOutcome",
    "OEEpisode",
    "OrderExecutionEnv",
    "oe_step",
    "run_oe_episode",
    "Portfolio",
    "TradeRecord",
    "STConfig",
    "StockMarket",
    "STEpisode",
    "StockTradingEnv",
    "st_step",
    "open_margin",
    "apply_margin",
    "build_state_vector",
    "run_st_episode",
    "TwoArmedBanditEnv",
    "sample_actions",
]

FEE_RATE = 0.001
STOCK_MARGIN_RATE = 0.0775
CRYPTO_MARGIN_RATE = 0.1712


class EnvError(Exception):
    pass


class AllocationError(EnvError, ValueError):
    pass


class MarginCallError(EnvError):
    pass


def sample_actions(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one action per row from uniforms ``u``."""
    p = np.atleast_2d(probs)
    return (p.cumsum(axis=1) < u[:, None]).sum(axis=1).clip(max=p.shape[1] - 1)


# --------------------------------------------------------------------------- OE


@dataclass(frozen=True)
class OrderTask:
    """``prices`` are p_1..p_T; ``history`` holds closes observed before the
    horizon opens (used for indicator warm-up and observations)."""

    order_id: str
    asset_id: str
    side: str
    quantity: float
    prices: tuple[float, ...]
    history: tuple[float, ...] = ()
    volumes: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "prices", tuple(float(p) for p in self.prices))
        object.__setattr__(self, "history", tuple(float(p) for p in self.history))
        object.__setattr__(self, "volumes", tuple(float(v) for v in self.volumes))
        if self.side not in ("sell", "buy"):
            raise ValueError(f"side must be 'sell' or 'buy', got {self.side!r}")
        if not self.quantity > 0:
            raise ValueError("target quantity must be positive")
        if len(self.prices) < 1:
            raise ValueError("horizon T must be >= 1")
        if min(self.prices + self.history) <= 0:
            raise ValueError("prices must be positive")

    @property
    def T(self) -> int:
        return len(self.prices)

    @property
    def mean_price(self) -> float:
        """The horizon's average market price, also the PA baseline."""
        return float(np.sum(np.asarray(self.prices)) / self.T)

    def observed(self, t: int) -> np.ndarray:
        """Closes known before executing step ``t``."""
        return np.asarray(self.history + self.prices[:t])


@dataclass(frozen=True)
class OEStepOutcome:
    a_t: float
    executed: float
    reward: float


def oe_step(task: OrderTask, t: int, a_t: float, alpha: float = 0.01,
            p_tilde: float | None = None, remaining: float = 1.0) -> OEStepOutcome:
    """Execute fraction ``a_t`` at price ``prices[t]``; reward is the relative
    price gain over the horizon mean less a quadratic impact penalty. The gain
    term is negated for buy orders."""
    if not 0 <= t < task.T:
        raise AllocationError(f"step {t} outside horizon [0, {task.T})")
    if a_t < 0 or a_t > remaining + 1e-12:
        raise AllocationError(f"fraction {a_t} exceeds remaining {remaining}")
    if p_tilde is None:
        p_tilde = task.mean_price
    gain = a_t * (task.prices[t] / p_tilde - 1.0)
    if task.side == "buy":
        gain = -gain
    return OEStepOutcome(a_t, a_t * task.quantity, gain - alpha * a_t**2)


@dataclass
class OEEpisode:
    task: OrderTask
    discounted_return: float
    avg_price: float
    fractions: np.ndarray
    rewards: np.ndarray
    trends: list[TrendLabel | None] = field(default_factory=list)

    @property
    def total_allocated(self) -> float:
        return float(self.fractions.sum())


class OrderExecutionEnv:
    """Single-order execution episode with ``n_actions`` grid levels:
    action ``j`` requests ``j`` units of ``Q/T``, capped by inventory. The
    residual is forced out at the last step."""

    n_features = 5

    def __init__(self, tasks: Sequence[OrderTask], n_actions: int, alpha: float = 0.01,
                 gamma: float = 1.0, lookback: int = DEFAULT_LOOKBACK, normalize: bool = False):
        if n_actions < 2:
            raise ValueError("need at least 2 actions")
        self.tasks = list(tasks)
        self.n_actions = n_actions
        self.alpha = alpha
        self.gamma = gamma
        self.lookback = lookback
        self.normalize = normalize
        self.task: OrderTask | None = None

    def reset(self, rng=None, task: OrderTask | None = None) -> Observation:
        if task is None:
            task = self.tasks[int(rng.integers(len(self.tasks)))]
        self.task = task
        self.t = 0
        self.units_left = task.T
        self.p_tilde = task.mean_price
        self.units = np.zeros(task.T, dtype=np.int64)
        self.rewards = np.zeros(task.T)
        return self.observe()

    def market(self) -> MarketFeatures | None:
        closes = self.task.observed(self.t)
        if len(closes) < self.lookback:
            return None
        return market_features(closes, len(closes) - 1, self.lookback, self.normalize)

    def observe(self) -> Observation:
        task, t = self.task, self.t
        closes = task.observed(t)
        ref = closes[0] if len(closes) else task.prices[0]
        last = closes[-1] if len(closes) else ref
        prev = closes[-2] if len(closes) > 1 else last
        x = np.array([[1.0, t / task.T, self.units_left / task.T, last / ref - 1.0, last / prev - 1.0]])
        return Observation(((task.order_id, t),), x, self.market(), t)

    def step(self, action: int | Sequence[int]):
        j = int(np.asarray(action).reshape(-1)[0])
        if not 0 <= j < self.n_actions:
            raise AllocationError(f"action {j} outside [0, {self.n_actions})")
        return self.step_units(j)

    def step_units(self, units: int):
        task, t = self.task, self.t
        units = min(int(units), self.units_left)
        if t == task.T - 1:
            units = self.units_left
        out = oe_step(task, t, units / task.T, self.alpha, self.p_tilde, self.units_left / task.T)
        self.units[t] = units
        self.rewards[t] = out.reward
        self.units_left -= units
        self.t += 1
        done = self.t == task.T
        return (None if done else self.observe()), out.reward, done

    def episode(self, trends=()) -> OEEpisode:
        task = self.task
        prices = np.asarray(task.prices)
        avg_price = float(np.sum(self.units * prices) / task.T)
        disc = float(np.sum(self.rewards * self.gamma ** np.arange(task.T)))
        return OEEpisode(task, disc, avg_price, self.units / task.T, self.rewards.copy(), list(trends))


def _schedule_units(fractions: np.ndarray, T: int) -> np.ndarray | None:
    units = np.rint(fractions * T)
    if np.allclose(units, fractions * T, rtol=0, atol=1e-9) and units.sum() == T:
        return units.astype(np.int64)
    return None


def run_oe_episode(task: OrderTask, policy, gamma: float = 1.0, alpha: float = 0.01,
                   rng: np.random.Generator | None = None, n_actions: int | None = None,
                   lookback: int = DEFAULT_LOOKBACK, normalize: bool = False) -> OEEpisode:
    """Roll one order through ``policy``.

    ``policy`` is either a schedule (object with ``fractions`` for ``T``
    steps) or a policy with ``distribution(obs)`` over the action grid, in
    which case actions are sampled with ``rng``.
    """
    fractions = getattr(policy, "fractions", None)
    if fractions is not None:
        return _run_schedule(task, np.asarray(fractions, dtype=float), gamma, alpha)
    m = n_actions or policy.n_actions
    env = OrderExecutionEnv([task], m, alpha, gamma, lookback, normalize)
    obs = env.reset(task=task)
    rng = rng or np.random.default_rng(0)
    trends = []
    done = False
    while not done:
        probs = policy.distribution(obs)
        trends.append(policy.trend(obs) if hasattr(policy, "trend") else None)
        j = int(sample_actions(probs, rng.random(1))[0])
        obs, _, done = env.step(j)
    return env.episode(trends)


def _run_schedule(task: OrderTask, fractions: np.ndarray, gamma: float, alpha: float) -> OEEpisode:
    if len(fractions) != task.T:
        raise AllocationError(f"schedule has {len(fractions)} steps, task has {task.T}")
    units = _schedule_units(fractions, task.T)
    if units is not None:
        env = OrderExecutionEnv([task], task.T + 1, alpha, gamma)
        env.reset(task=task)
        for u in units:
            env.step_units(int(u))
        return env.episode()
    # off-grid schedule (e.g. VWAP): execute fractions directly
    p_tilde = task.mean_price
    remaining = 1.0
    rewards = np.zeros(task.T)
    a = fractions.copy()
    a[-1] = max(0.0, 1.0 - a[:-1].sum())
    for t in range(task.T):
        out = oe_step(task, t, a[t], alpha, p_tilde, remaining)
        rewards[t] = out.reward
        remaining -= a[t]
    avg_price = float(np.sum(a * np.asarray(task.prices)))
    disc = float(np.sum(rewards * gamma ** np.arange(task.T)))
    return OEEpisode(task, disc, avg_price, a, rewards)


# --------------------------------------------------------------------------- ST


@dataclass(frozen=True)
class Portfolio:
    balance: float
    holdings: np.ndarray
    borrowed: float = 0.0
    accrued_interest: float = 0.0

    def __post_init__(self):
        h = np.array(self.holdings, dtype=float)
        h.setflags(write=False)
        object.__setattr__(self, "holdings", h)

    @classmethod
    def cash(cls, capital: float, n_assets: int) -> "Portfolio":
        return cls(float(capital), np.zeros(n_assets))

    def value(self, prices) -> float:
        return float(self.balance + self.holdings @ np.asarray(prices, dtype=float)
                     - self.borrowed - self.accrued_interest)


@dataclass(frozen=True)
class TradeRecord:
    timestamp: int
    asset: str
    quantity: float
    price: float
    fee: float
    requested: float

    @property
    def clipped(self) -> bool:
        return self.quantity != self.requested


def _floor_qty(q: float, decimals: int) -> float:
    scale = 10.0**decimals
    return math.floor(q * scale + 1e-9) / scale


def st_step(portfolio: Portfolio, prices, action, caps=None, fee_rate: float = FEE_RATE,
            quantity_decimals: int = 0, timestamp: int = 0, assets: Sequence[str] | None = None):
    """Apply signed share quantities at ``prices``: sells first, then buys in
    asset order. Sells are clipped to holdings, buys to cash after fees.

    Returns ``(portfolio, reward, trades)`` where ``reward`` is gross sell
    proceeds minus gross buy cost (fees excluded) and ``trades`` records every
    non-zero request, clipped or not.
    """
    p = np.asarray(prices, dtype=float)
    req = np.asarray(action, dtype=float)
    D = len(p)
    assets = assets or [str(i) for i in range(D)]
    if caps is not None:
        caps = np.broadcast_to(np.asarray(caps, dtype=float), (D,))
        act = np.clip(req, -caps, caps)
    else:
        act = req.copy()
    act = np.trunc(act * 10.0**quantity_decimals) / 10.0**quantity_decimals

    balance = portfolio.balance
    holdings = portfolio.holdings.copy()
    trades: dict[int, TradeRecord] = {}
    sell_change = buy_change = 0.0

    for d in np.flatnonzero(act < 0):
        q = min(-act[d], holdings[d])
        gross = q * p[d]
        fee = fee_rate * gross
        holdings[d] -= q
        balance += gross - fee
        sell_change += gross
        trades[d] = TradeRecord(timestamp, assets[d], -q, p[d], fee, req[d])

    for d in np.flatnonzero(act > 0):
        unit_cost = p[d] * (1.0 + fee_rate)
        q = min(act[d], _floor_qty(max(balance, 0.0) / unit_cost, quantity_decimals))
        if q * unit_cost > balance:
            q = max(0.0, q - 10.0**-quantity_decimals)
        gross = q * p[d]
        fee = fee_rate * gross
        holdings[d] += q
        balance -= gross + fee
        buy_change += gross
        trades[d] = TradeRecord(timestamp, assets[d], q, p[d], fee, req[d])

    for d in np.flatnonzero((req != 0) & (act == 0)):
        trades[d] = TradeRecord(timestamp, assets[d], 0.0, p[d], 0.0, req[d])

    new = replace(portfolio, balance=balance, holdings=holdings)
    return new, sell_change - buy_change, [trades[d] for d in sorted(trades)]


def open_margin(portfolio: Portfolio, prices) -> Portfolio:
    """Borrow cash equal to the account's net value (1:1 loan-to-value)."""
    net = portfolio.value(prices)
    if net <= 0:
        raise MarginCallError("cannot open margin on a non-positive account")
    extra = net - portfolio.borrowed
    return replace(portfolio, balance=portfolio.balance + extra, borrowed=net)


def apply_margin(portfolio: Portfolio, prices, elapsed_years: float, annual_rate: float = STOCK_MARGIN_RATE,
                 relever: bool = True) -> Portfolio:
    """Settle one adjustment boundary: pay simple interest on the loan for
    ``elapsed_years`` from cash, then (if ``relever``) reset the loan to the
    account's net value. Raises :class:`MarginCallError` when cash cannot
    cover the interest or the repayment."""
    interest = portfolio.borrowed * annual_rate * elapsed_years
    due = portfolio.accrued_interest + interest
    if due > portfolio.balance + 1e-9:
        raise MarginCallError(f"interest {due:.2f} exceeds cash balance {portfolio.balance:.2f}")
    out = replace(portfolio, balance=portfolio.balance - due, accrued_interest=0.0)
    if relever:
        net = out.value(prices)
        if net <= 0:
            raise MarginCallError(f"account net value {net:.2f} is non-positive")
        delta = net - out.borrowed
        if out.balance + delta < -1e-9:
            raise MarginCallError(f"cash {out.balance:.2f} cannot repay {-delta:.2f} of the loan")
        out = replace(out, balance=out.balance + delta, borrowed=net)
    return out


def build_state_vector(balance: float, prices, holdings, features) -> np.ndarray:
    """``[balance] + closes(D) + shares(D) + 9 indicators per asset``: length 1 + 11D."""
    prices = np.asarray(prices, dtype=float)
    holdings = np.asarray(holdings, dtype=float)
    feats = np.asarray(features, dtype=float)
    D = len(prices)
    if feats.shape != (D, 9):
        raise WarmupError(f"expected state features of shape ({D}, 9), got {feats.shape}")
    if np.isnan(feats).any():
        raise WarmupError("state features not yet available (warm-up)")
    return np.concatenate([[float(balance)], prices, holdings, feats.reshape(-1)])


@dataclass
class STConfig:
    initial_capital: float = 1_000_000.0
    fee_rate: float = FEE_RATE
    cap_shares: float | None = 100
    cap_notional: float | None = None
    quantity_decimals: int = 0
    margin: bool = False
    annual_rate: float = STOCK_MARGIN_RATE
    rebalance_bars: int = 63
    periods_per_year: float = 252
    lookback: int = DEFAULT_LOOKBACK
    normalize_indicators: bool = False

    @classmethod
    def stock(cls, **kw) -> "STConfig":
        return cls(**kw)

    @classmethod
    def crypto(cls, **kw) -> "STConfig":
        base = dict(cap_shares=None, cap_notional=100_000.0, quantity_decimals=6,
                    annual_rate=CRYPTO_MARGIN_RATE, rebalance_bars=3 * 91, periods_per_year=3 * 365)
        base.update(kw)
        return cls(**base)

    def caps(self, prices: np.ndarray) -> np.ndarray:
        if self.cap_notional is not None:
            return np.floor(self.cap_notional / prices * 1e6) / 1e6
        return np.full(len(prices), float(self.cap_shares))


class StockMarket:
    """Aligned multi-asset bars plus precomputed indicators.

    The sketch reads a single market proxy: ``index`` if given, otherwise the
    equal-weighted average of each asset's close relative to its first close,
    scaled to 100.
    """

    def __init__(self, assets: Sequence[AssetSeries], index: AssetSeries | None = None,
                 lookback: int = DEFAULT_LOOKBACK, normalize: bool = False):
        assets = list(assets)
        if not assets:
            raise ValueError("need at least one asset")
        ts = assets[0].timestamps
        for a in assets[1:]:
            if not np.array_equal(a.timestamps, ts):
                raise ValueError(f"asset {a.asset_id} is not aligned with {assets[0].asset_id}")
        self.assets = assets
        self.asset_ids = [a.asset_id for a in assets]
        self.timestamps = ts
        self.closes = np.stack([a.closes for a in assets], axis=1)
        if index is not None:
            if not np.array_equal(index.timestamps, ts):
                raise ValueError("index series is not aligned with the assets")
            self.proxy = index.closes
        else:
            self.proxy = 100.0 * (self.closes / self.closes[0]).mean(axis=1)
        self.lookback = lookback
        self.normalize = normalize
        self.market = market_feature_matrix(self.proxy, lookback, normalize)
        self.state = np.stack([state_feature_matrix(a) for a in assets], axis=1)

    @property
    def D(self) -> int:
        return len(self.assets)

    def __len__(self):
        return len(self.timestamps)

    @property
    def warmup(self) -> int:
        """First index where both the sketch and state indicators exist."""
        return max(self.lookback - 1, STATE_WARMUP - 1)

    def market_at(self, t: int) -> MarketFeatures | None:
        row = self.market[t]
        if np.isnan(row).any():
            return None
        return MarketFeatures(*row, t=t, g=self.lookback)

    def index_range(self, window) -> tuple[int, int]:
        return (int(np.searchsorted(self.timestamps, window[0], "left")),
                int(np.searchsorted(self.timestamps, window[1], "left")))


@dataclass
class STEpisode:
    timestamps: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    trades: list[TradeRecord]
    trends: list[tuple[int, TrendLabel | None]]
    margin_call: bool = False
    final: Portfolio | None = None


class StockTradingEnv:
    """Steps ``start .. end-1`` of a :class:`StockMarket`; at bar ``t`` the
    policy sees closes at ``t`` and trades at them. Each asset row picks one
    of ``m`` levels mapped evenly onto ``[-cap, +cap]`` shares.

    ``reward="trade"`` returns the gross sell-minus-buy change of each step;
    ``reward="return"`` the relative change in account value, which suits
    policy-gradient training better.
    """

    n_features = 6

    def __init__(self, market: StockMarket, config: STConfig, window: tuple[int, int] | None = None,
                 n_actions: int = 3, gamma: float = 1.0, reward: str = "trade"):
        if reward not in ("trade", "return"):
            raise ValueError(f"unknown reward {reward!r}")
        self.reward_kind = reward
        self.market = market
        self.config = config
        start, end = window or (market.warmup, len(market))
        if start < market.warmup:
            raise WarmupError(f"window starts at bar {start}, indicators need {market.warmup}")
        if end - start < 2:
            raise EnvError("trading window needs at least 2 bars")
        if np.isnan(market.state[start:end]).any():
            raise WarmupError("state features not available inside the trading window")
        self.start, self.end = start, end
        self.n_actions = n_actions
        self.gamma = gamma

    def reset(self, rng=None) -> Observation:
        cfg = self.config
        self.t = self.start
        self.portfolio = Portfolio.cash(cfg.initial_capital, self.market.D)
        if cfg.margin:
            self.portfolio = open_margin(self.portfolio, self.market.closes[self.t])
        self.since_rebalance = 0
        self.values = [self.portfolio.value(self.market.closes[self.t])]
        self.rewards, self.trades = [], []
        self.margin_call = False
        return self.observe()

    def observe(self) -> Observation:
        mk, t, pf = self.market, self.t, self.portfolio
        prices = mk.closes[t]
        feats = mk.state[t]
        total = max(pf.value(prices) + pf.borrowed, 1e-12)
        rows = np.column_stack([
            np.ones(mk.D),
            prices / feats[:, 7] - 1.0,
            prices / feats[:, 8] - 1.0,
            feats[:, 4] / 100.0 - 0.5,
            feats[:, 0] / prices,
            pf.holdings * prices / total,
        ])
        ts = int(mk.timestamps[t])
        keys = tuple((a, ts) for a in mk.asset_ids)
        # features were checked for warm-up when the window was opened
        sv = np.concatenate([[pf.balance], prices, pf.holdings, feats.reshape(-1)])
        return Observation(keys, rows, mk.market_at(t), t, ts, sv)

    def levels_to_quantities(self, levels: np.ndarray, prices: np.ndarray) -> np.ndarray:
        u = -1.0 + 2.0 * np.asarray(levels, dtype=float) / (self.n_actions - 1)
        return u * self.config.caps(prices)

    def step(self, levels):
        cfg, mk, t = self.config, self.market, self.t
        prices = mk.closes[t]
        qty = self.levels_to_quantities(levels, prices)
        self.portfolio, reward, trades = st_step(
            self.portfolio, prices, qty, cfg.caps(prices), cfg.fee_rate,
            cfg.quantity_decimals, int(mk.timestamps[t]), mk.asset_ids)
        self.trades.extend(trades)
        self.rewards.append(reward)
        self.t += 1
        nxt = mk.closes[self.t]
        done = self.t >= self.end - 1
        if cfg.margin:
            self.since_rebalance += 1
            boundary = self.since_rebalance >= cfg.rebalance_bars
            if boundary or done:
                try:
                    self.portfolio = apply_margin(self.portfolio, nxt,
                                                  self.since_rebalance / cfg.periods_per_year,
                                                  cfg.annual_rate, relever=boundary)
                except MarginCallError:
                    self.margin_call = True
                    done = True
                self.since_rebalance = 0
        self.values.append(self.portfolio.value(nxt))
        if self.reward_kind == "return":
            reward = self.values[-1] / self.values[-2] - 1.0
        return (None if done else self.observe()), reward, done

    def episode(self, trends) -> STEpisode:
        n = len(self.values)
        return STEpisode(self.market.timestamps[self.start:self.start + n].copy(),
                         np.asarray(self.values), np.asarray(self.rewards), list(self.trades),
                         list(trends), self.margin_call, self.portfolio)


def run_st_episode(market: StockMarket, policy, config: STConfig, window: tuple[int, int] | None = None,
                   rng: np.random.Generator | None = None) -> STEpisode:
    """Run ``policy`` (anything with ``distribution(obs)`` over per-asset
    levels) through the trading window, sampling actions with ``rng``."""
    env = StockTradingEnv(market, config, window, policy.n_actions)
    rng = rng or np.random.default_rng(0)
    obs = env.reset()
    trends = []
    done = False
    while not done:
        probs = policy.distribution(obs)
        trend = policy.trend(obs) if hasattr(policy, "trend") else None
        trends.append((obs.timestamp, trend))
        levels = sample_actions(probs, rng.random(market.D))
        obs, _, done = env.step(levels)
    return env.episode(trends)


class TwoArmedBanditEnv:
    """Two states (one-hot features), two arms; arm 1 pays +1, arm 0 pays 0."""

    n_actions = 2
    n_features = 2
    gamma = 0.0

    def __init__(self, pulls: int = 10):
        self.pulls = pulls

    def reset(self, rng) -> Observation:
        self.rng = rng
        self.left = self.pulls
        return self._obs()

    def _obs(self) -> Observation:
        s = int(self.rng.integers(2))
        return Observation((s,), np.eye(2)[[s]])

    def step(self, action):
        a = int(np.asarray(action).reshape(-1)[0])
        self.left -= 1
        done = self.left == 0
        return (None if done else self._obs()), float(a == 1), done
