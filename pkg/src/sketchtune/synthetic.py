"""Seeded synthetic markets for tests, demos and the regime-recovery check."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import OrderTask, STConfig, StockMarket
from .market_data import AssetSeries, day_grid
from .optimizer import STValidation, threshold_bounds
from .policy import ConstantPolicy, EnsemblePolicy
from .sketch import Mode, SketchParams, SketchTemplate, default_template

__all__ = ["Regime", "DEFAULT_REGIMES", "RegimeMarket", "regime_market", "regime_ensemble", "order_tasks", "ohlcv_from_closes",
           "RegimeExperiment", "regime_experiment", "one_hot_params", "intraday_series", "write_demo"]


@dataclass(frozen=True)
class Regime:
    drift: float  # mean log return per bar
    noise: float  # std of the common log return per bar
    min_len: int
    max_len: int


# Ascents climb slowly and quietly; descents are short, steep and noisy, so
# that the total move of one regime of each kind roughly cancels.
DEFAULT_REGIMES = {
    "ascend": Regime(0.005, 0.006, 45, 90),
    "descend": Regime(-0.010, 0.016, 22, 45),
    "oscillation": Regime(0.0, 0.006, 45, 90),
}


def ohlcv_from_closes(asset_id: str, timestamps, closes, rng, interval: int = 86400,
                      calendar: str | None = None) -> AssetSeries:
    closes = np.asarray(closes, dtype=float)
    opens = np.concatenate([[closes[0]], closes[:-1]])
    wiggle = np.abs(rng.normal(0, 0.003, size=(2, len(closes))))
    highs = np.maximum(opens, closes) * (1 + wiggle[0])
    lows = np.minimum(opens, closes) * (1 - wiggle[1])
    volumes = rng.integers(10_000, 100_000, size=len(closes)).astype(float)
    return AssetSeries.from_arrays(asset_id, interval, timestamps, opens, highs, lows, closes, volumes,
                                   calendar=calendar)


@dataclass
class RegimeMarket:
    assets: list[AssetSeries]
    regimes: np.ndarray  # per-bar label: "ascend" / "descend" / "oscillation"

    @property
    def timestamps(self) -> np.ndarray:
        return self.assets[0].timestamps


def regime_market(seed: int, n_bars: int = 1600, n_assets: int = 3, regimes: dict | None = None,
                  idio: float = 0.003, start: str = "2015-01-01") -> RegimeMarket:
    """Assets sharing a piecewise market drift: ascending, descending and
    trendless oscillating regimes of random length, plus idiosyncratic noise.
    Regimes are drawn without immediate repetition."""
    table = DEFAULT_REGIMES if regimes is None else regimes
    rng = np.random.default_rng(seed)
    labels = []
    kinds = list(table)
    prev = None
    while len(labels) < n_bars:
        kind = str(rng.choice([k for k in kinds if k != prev]))
        labels.extend([kind] * int(rng.integers(table[kind].min_len, table[kind].max_len + 1)))
        prev = kind
    regimes_arr = np.array(labels[:n_bars])
    drift = np.array([table[r].drift for r in regimes_arr])
    noise = np.array([table[r].noise for r in regimes_arr])
    common = drift + noise * rng.standard_normal(n_bars)
    ts = day_grid(start, n_bars)
    assets = []
    for d in range(n_assets):
        r = common + rng.normal(0, idio, n_bars)
        closes = 100.0 * (1 + 0.2 * d) * np.exp(np.cumsum(r))
        assets.append(ohlcv_from_closes(f"SYN{d}", ts, closes, rng))
    return RegimeMarket(assets, regimes_arr)


def regime_ensemble(n_actions: int = 3, strength: float = 6.0) -> EnsemblePolicy:
    """Three fixed sub-policies over sell/hold/buy levels: a buyer that wins
    in ascents, a seller that wins in descents and a uniform one."""
    levels = np.linspace(-1.0, 1.0, n_actions)
    buyer = ConstantPolicy(strength * levels, "buyer")
    seller = ConstantPolicy(-strength * levels, "seller")
    uniform = ConstantPolicy(np.zeros(n_actions), "uniform")
    return EnsemblePolicy([buyer, seller, uniform], "regime-ensemble")


def order_tasks(seed: int, n: int, T: int = 16, history: int = 30, vol: float = 0.002,
                side: str = "sell", quantity: float = 10_000.0) -> list[OrderTask]:
    """Intraday random-walk price paths with preceding history bars."""
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n):
        steps = rng.normal(0, vol, history + T)
        path = 10.0 * np.exp(rng.normal(0, 0.3)) * np.exp(np.cumsum(steps))
        volumes = rng.integers(1_000, 10_000, T).astype(float)
        tasks.append(OrderTask(f"order{i}", f"A{i % 7}", side, quantity,
                               tuple(path[history:]), tuple(path[:history]), tuple(volumes)))
    return tasks


@dataclass
class RegimeExperiment:
    """One seeded regime market with fixed train / validation / test windows.

    Thresholds are bounded by the training window, the sketch is fitted on the
    validation window and judged on the test window.
    """

    seed: int
    market: StockMarket
    regimes: np.ndarray
    template: SketchTemplate
    base: EnsemblePolicy
    config: STConfig
    train: tuple[int, int]
    validation_window: tuple[int, int]
    test_window: tuple[int, int]

    def bounds(self) -> list[tuple[float, float]]:
        return threshold_bounds(self.template, self.market.market[self.train[0]:self.train[1]])

    def validation(self) -> STValidation:
        return STValidation(self.market, self.validation_window, self.config, self.seed)

    def test(self) -> STValidation:
        return STValidation(self.market, self.test_window, self.config, self.seed + 100)


def regime_experiment(seed: int) -> RegimeExperiment:
    rm = regime_market(seed)
    return RegimeExperiment(
        seed=seed,
        market=StockMarket(rm.assets),
        regimes=rm.regimes,
        template=default_template(Mode.ensemble(3)),
        base=regime_ensemble(),
        config=STConfig(cap_shares=1000),
        train=(60, 400),
        validation_window=(400, 1000),
        test_window=(1000, 1600),
    )


def one_hot_params(template: SketchTemplate, thresholds, member: int) -> SketchParams:
    """Every trend routes all weight to sub-policy ``member``."""
    k = template.mode.k
    w = tuple(1.0 if j == member else 0.0 for j in range(k))
    return SketchParams(tuple(thresholds), {t: w for t in template.trends})


_DEMO_ST = """\
[data]
assets = {assets}
interval = 1d
calendar = continuous

[run]
mode = st
market = stock
seeds = 0, 1, 2
output = out

[splits]
train = 400d
validation = 300d
test = 300d
step = 300d

[env]
cap_shares = 1000

[policy]
sources = toy
members = 3
episodes = 5
"""

_DEMO_OE = """\
[data]
assets = {assets}
interval = 1min

[run]
mode = oe
seeds = 0, 1, 2
output = out

[splits]
train = 20d
validation = 10d
test = 10d
step = 10d

[env]
n_actions = 4
alpha = 0.01

[oe]
side = sell
quantity = 10000
horizon = 16
history = 30

[policy]
sources = toy
members = 1
episodes = 50
"""


def intraday_series(seed: int, asset_id: str, days: int = 60, bars_per_day: int = 20,
                    start: str = "2021-01-04", vol: float = 0.002) -> AssetSeries:
    """Minute bars for ``days`` consecutive days, ``bars_per_day`` from 09:30 UTC."""
    from .market_data import epoch

    rng = np.random.default_rng(seed)
    day0 = epoch(start) + 9 * 3600 + 1800
    ts = np.concatenate([day0 + d * 86400 + 60 * np.arange(bars_per_day) for d in range(days)])
    closes = 20.0 * np.exp(np.cumsum(rng.normal(0, vol, len(ts))))
    return ohlcv_from_closes(asset_id, ts, closes, rng, interval=60)


def write_demo(out: Path, seed: int = 0, mode: str = "st") -> Path:
    """Write synthetic CSVs plus ``config.ini`` under ``out``; returns the config path."""
    from .market_data import export_series

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if mode == "st":
        series = regime_market(seed).assets
        template = _DEMO_ST
    else:
        series = [intraday_series(seed + i, f"MIN{i}") for i in range(2)]
        template = _DEMO_OE
    names = []
    for s in series:
        export_series(s, out / f"{s.asset_id}.csv")
        names.append(f"{s.asset_id}.csv")
    cfg = out / "config.ini"
    cfg.write_text(template.format(assets=", ".join(names)), encoding="utf-8")
    return cfg
