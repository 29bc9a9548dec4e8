"""Run configuration: one INI document with sections.

Defaults follow the stated experimental protocol (budget 20, five seeds,
0.1% fees, 100-share caps, quarterly margin settlement), so a config that
only names its data files runs the standard setup.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import CRYPTO_MARGIN_RATE, FEE_RATE, STOCK_MARGIN_RATE, STConfig
from .market_data import parse_duration
from .metrics import PERIODS_8H, PERIODS_DAILY

__all__ = ["ConfigError", "RunConfig", "load_config", "stage_seed", "STAGES"]


class ConfigError(ValueError):
    pass


# Stage ids for the seed splitter. Append new stages at the end so existing
# streams never move.
STAGES = ("toy", "bo", "validation", "sample")


def stage_seed(root: int, stage: str, *counters: int) -> int:
    """Independent 63-bit seed for ``stage`` under ``root``; counters pick the
    split, member or evaluation seed inside the stage."""
    ss = np.random.SeedSequence([int(root), STAGES.index(stage), *map(int, counters)])
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass
class RunConfig:
    assets: list[Path]
    mode: str = "st"
    market: str = "stock"
    index: Path | None = None
    schema: dict[str, str] = field(default_factory=dict)
    interval: str = "1d"
    calendar: str | None = None
    holidays: list[str] = field(default_factory=list)
    sketch: str = "default"
    budget: int = 20
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output: Path = Path("out")
    train: str = "6M"
    validation: str = "1M"
    test: str = "1M"
    step: str = "3M"
    # env
    gamma: float = 1.0
    alpha: float = 0.01
    fee_rate: float = FEE_RATE
    cap_shares: float | None = 100.0
    cap_notional: float | None = None
    quantity_decimals: int = 0
    margin: bool = False
    annual_rate: float = STOCK_MARGIN_RATE
    initial_capital: float = 1_000_000.0
    rebalance_bars: int = 63
    periods_per_year: float = PERIODS_DAILY
    n_actions: int = 3
    lookback: int = 14
    normalize_indicators: bool = False
    # policies
    policy_sources: list[Path] = field(default_factory=list)
    toy_members: int = 1
    toy_episodes: int = 20
    toy_lr: float = 0.01
    # order execution
    side: str = "sell"
    quantity: float = 10_000.0
    horizon: int = 16
    history: int = 30
    # search-space overrides by hole name, e.g. threshold_0
    search: dict[str, tuple[float, float]] = field(default_factory=dict)
    source: Path | None = None

    def st_config(self) -> STConfig:
        return STConfig(
            initial_capital=self.initial_capital,
            fee_rate=self.fee_rate,
            cap_shares=self.cap_shares,
            cap_notional=self.cap_notional,
            quantity_decimals=self.quantity_decimals,
            margin=self.margin,
            annual_rate=self.annual_rate,
            rebalance_bars=self.rebalance_bars,
            periods_per_year=self.periods_per_year,
            lookback=self.lookback,
            normalize_indicators=self.normalize_indicators,
        )

    @property
    def uses_toy_policy(self) -> bool:
        return not self.policy_sources

    def echo(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if k == "source":
                continue
            if isinstance(v, Path):
                v = str(v)
            elif isinstance(v, list):
                v = [str(x) if isinstance(x, Path) else x for x in v]
            elif isinstance(v, dict):
                v = {a: list(b) if isinstance(b, tuple) else b for a, b in v.items()}
            out[k] = v
        return out


_MARKET_PRESETS = {
    "stock": {},
    "crypto": dict(cap_shares=None, cap_notional=100_000.0, quantity_decimals=6, annual_rate=CRYPTO_MARGIN_RATE,
                   rebalance_bars=3 * 91, periods_per_year=PERIODS_8H, interval="8h", calendar="continuous"),
}

_FLOAT = {"gamma", "alpha", "fee_rate", "annual_rate", "initial_capital", "periods_per_year",
          "toy_lr", "quantity"}
_OPT_FLOAT = {"cap_shares", "cap_notional"}
_INT = {"budget", "seed", "quantity_decimals", "rebalance_bars", "n_actions", "lookback",
        "toy_members", "toy_episodes", "horizon", "history"}
_BOOL = {"margin", "normalize_indicators"}

_SECTIONS = {
    "data": {"assets", "index", "schema", "interval", "calendar", "holidays"},
    "run": {"mode", "market", "sketch", "budget", "seed", "seeds", "output"},
    "splits": {"train", "validation", "test", "step"},
    "env": {"gamma", "alpha", "fee_rate", "cap_shares", "cap_notional", "quantity_decimals", "margin",
            "annual_rate", "initial_capital", "rebalance_bars", "periods_per_year", "n_actions", "lookback",
            "normalize_indicators"},
    "policy": {"sources", "members", "episodes", "lr"},
    "oe": {"side", "quantity", "horizon", "history"},
    "search": None,
}
_POLICY_KEYS = {"members": "toy_members", "episodes": "toy_episodes", "lr": "toy_lr"}


def _split_list(text: str) -> list[str]:
    return [s.strip() for s in text.replace("\n", ",").split(",") if s.strip()]


def _bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _convert(key: str, text: str):
    try:
        if key in _FLOAT:
            return float(text)
        if key in _OPT_FLOAT:
            return None if text.strip().lower() in ("", "none") else float(text)
        if key in _INT:
            return int(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    if key in _BOOL:
        return _bool(key, text)
    return text.strip()


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a run config; relative paths resolve against the
    config file's directory. Every problem raises :class:`ConfigError`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.parent
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        allowed = _SECTIONS[section]
        if allowed is not None:
            unknown = set(cp[section]) - allowed
            if unknown:
                raise ConfigError(f"[{section}] has unknown keys: {', '.join(sorted(unknown))}")
    if not cp.has_option("data", "assets"):
        raise ConfigError("[data] assets is required")

    kw: dict = {}
    run = cp["run"] if cp.has_section("run") else {}
    market = run.get("market", "stock").strip()
    if market not in _MARKET_PRESETS:
        raise ConfigError(f"market must be stock or crypto, got {market!r}")
    kw.update(_MARKET_PRESETS[market])
    kw["market"] = market

    data = cp["data"]
    kw["assets"] = [base / p for p in _split_list(data["assets"])]
    if data.get("index", "").strip():
        kw["index"] = base / data["index"].strip()
    if "schema" in data:
        schema = {}
        for item in _split_list(data["schema"]):
            if ":" not in item:
                raise ConfigError(f"schema entries look like field:column, got {item!r}")
            k, v = item.split(":", 1)
            schema[k.strip()] = v.strip()
        kw["schema"] = schema
    for key in ("interval", "calendar"):
        if key in data:
            kw[key] = data[key].strip() or None
    if "holidays" in data:
        kw["holidays"] = _split_list(data["holidays"])

    for key in ("mode", "sketch", "budget", "seed"):
        if key in run:
            kw[key] = _convert(key, run[key])
    if "seeds" in run:
        try:
            kw["seeds"] = [int(s) for s in _split_list(run["seeds"])]
        except ValueError:
            raise ConfigError(f"seeds: expected integers, got {run['seeds']!r}") from None
    if "output" in run:
        kw["output"] = base / run["output"].strip()
    else:
        kw["output"] = base / "out"

    for section in ("splits", "env", "oe"):
        if cp.has_section(section):
            for key, text in cp[section].items():
                kw[key] = _convert(key, text)
    if cp.has_section("policy"):
        pol = cp["policy"]
        if pol.get("sources", "toy").strip() not in ("", "toy"):
            kw["policy_sources"] = [base / p for p in _split_list(pol["sources"])]
        for key, attr in _POLICY_KEYS.items():
            if key in pol:
                kw[attr] = _convert(attr, pol[key])
    if cp.has_section("search"):
        search = {}
        for key, text in cp["search"].items():
            parts = _split_list(text)
            try:
                lo, hi = (float(p) for p in parts)
            except ValueError:
                raise ConfigError(f"search {key}: expected 'lo, hi', got {text!r}") from None
            search[key] = (lo, hi)
        kw["search"] = search
    kw["source"] = path
    cfg = RunConfig(**kw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.mode not in ("oe", "st"):
        raise ConfigError(f"mode must be oe or st, got {cfg.mode!r}")
    if not cfg.assets:
        raise ConfigError("no asset files listed")
    for p in cfg.assets + ([cfg.index] if cfg.index else []) + cfg.policy_sources:
        if not Path(p).is_file():
            raise ConfigError(f"referenced file {p} does not exist")
    if cfg.sketch != "default" and not Path(cfg.sketch).is_file():
        resolved = cfg.source.parent / cfg.sketch if cfg.source else Path(cfg.sketch)
        if not resolved.is_file():
            raise ConfigError(f"sketch file {cfg.sketch} does not exist")
        cfg.sketch = str(resolved)
    if cfg.budget < 1:
        raise ConfigError("budget must be >= 1")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if not 0 < cfg.gamma <= 1:
        raise ConfigError("gamma must lie in (0, 1]")
    if cfg.n_actions < 2:
        raise ConfigError("n_actions must be >= 2")
    if cfg.side not in ("sell", "buy"):
        raise ConfigError("side must be sell or buy")
    if cfg.horizon < 1 or cfg.history < cfg.lookback:
        raise ConfigError(f"OE needs horizon >= 1 and history >= lookback ({cfg.lookback})")
    if cfg.toy_members < 1 or cfg.toy_episodes < 1:
        raise ConfigError("policy members and episodes must be >= 1")
    if cfg.mode == "oe" and cfg.n_actions > cfg.horizon + 1:
        raise ConfigError(f"OE n_actions {cfg.n_actions} exceeds horizon + 1")
    for key in ("train", "validation", "test", "step"):
        try:
            d = parse_duration(getattr(cfg, key))
        except ValueError as exc:
            raise ConfigError(f"splits {key}: {exc}") from None
        if isinstance(d, int) and d <= 0:
            raise ConfigError(f"splits {key} must be positive")
    if cfg.cap_shares is None and cfg.cap_notional is None:
        raise ConfigError("one of cap_shares or cap_notional is required")
    for key, (lo, hi) in cfg.search.items():
        if not hi >= lo:
            raise ConfigError(f"search {key}: upper bound below lower bound")
