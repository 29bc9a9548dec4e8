"""ingest -> fit -> backtest -> report, as library calls.

The command-line front end in :mod:`sketchtune.cli` only parses arguments
and maps exceptions to exit codes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .baselines import buy_and_hold, twap_schedule, vwap_schedule
from .config import ConfigError, RunConfig, stage_seed
from .env import OrderExecutionEnv, OrderTask, StockMarket, StockTradingEnv, run_oe_episode, run_st_episode
from .indicators import STATE_FEATURE_NAMES, market_feature_matrix
from .market_data import AssetSeries, RollingSplit, load_series, make_rolling_splits
from .metrics import EquityCurve, OEOrderResult, oe_metrics, st_metrics
from .optimizer import Objective, OEValidation, SHARPE, STValidation, fit_sketch, threshold_bounds
from .policy import EnsemblePolicy, load_external_policy, train_toy_policy, tuned_policy
from .sketch import (
    SINGLE,
    Mode,
    SketchTemplate,
    default_template,
    parse_sketch,
    read_params,
    write_params,
)

__all__ = [
    "REPORT_FORMAT",
    "STRATEGIES",
    "METRIC_COLUMNS",
    "ComparisonError",
    "Dataset",
    "load_dataset",
    "order_tasks_from_bars",
    "build_template",
    "base_policy",
    "cmd_fit",
    "cmd_backtest",
    "cmd_report",
    "aggregate",
    "write_report",
    "read_report",
    "render_report",
    "read_curve",
    "dump_indicators",
]

log = logging.getLogger(__name__)

REPORT_FORMAT = "sketchtune.run-report"
STRATEGIES = {"oe": ("tuned", "base", "twap", "vwap"), "st": ("tuned", "base", "buy_and_hold", "index")}
METRIC_COLUMNS = {"oe": ("PA", "ARR", "GLR", "POS"), "st": ("AR", "CR", "AV", "MD", "SR")}
VWAP_HISTORY_DAYS = 20


class ComparisonError(ValueError):
    pass


# --------------------------------------------------------------------------- data


def order_tasks_from_bars(series: AssetSeries, horizon: int, history: int, side: str,
                          quantity: float) -> list[tuple[int, OrderTask]]:
    """One order per UTC day, paired with the timestamp of its first bar.

    The day's first ``horizon`` bars form the horizon and the ``history``
    closes before it the warm-up. Days with too few bars, or without enough
    earlier bars, are skipped.
    """
    ts, closes, vols = series.timestamps, series.closes, series.volumes
    days = ts // 86400
    starts = np.flatnonzero(np.r_[True, days[1:] != days[:-1]])
    ends = np.r_[starts[1:], len(ts)]
    out = []
    for s, e in zip(starts, ends):
        if e - s < horizon or s < history:
            continue
        day = datetime.fromtimestamp(int(ts[s]), tz=timezone.utc).strftime("%Y-%m-%d")
        task = OrderTask(f"{series.asset_id}@{day}", series.asset_id, side, quantity,
                         tuple(closes[s:s + horizon]), tuple(closes[s - history:s]), tuple(vols[s:s + horizon]))
        out.append((int(ts[s]), task))
    return out


@dataclass
class Dataset:
    config: RunConfig
    assets: list[AssetSeries]
    index: AssetSeries | None = None
    market: StockMarket | None = None
    tasks: list[OrderTask] = field(default_factory=list)
    task_times: dict[str, int] = field(default_factory=dict)

    @property
    def span(self) -> tuple[int, int]:
        ts = self.assets[0].timestamps
        step = int(ts[1] - ts[0]) if len(ts) > 1 else 1
        return int(ts[0]), int(ts[-1]) + step

    def splits(self) -> list[RollingSplit]:
        c = self.config
        return make_rolling_splits(self.span, c.train, c.validation, c.test, c.step)

    def window_tasks(self, window) -> list[OrderTask]:
        return [t for t in self.tasks if window[0] <= self.task_times[t.order_id] < window[1]]

    def window_bars(self, window) -> tuple[int, int]:
        """Bar index range of ``window``, clipped to the indicator warm-up."""
        lo, hi = self.market.index_range(window)
        return max(lo, self.market.warmup), hi


def load_dataset(cfg: RunConfig) -> Dataset:
    assets = [load_series(p, cfg.schema, None, cfg.interval, cfg.calendar, cfg.holidays) for p in cfg.assets]
    ids = [a.asset_id for a in assets]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate asset ids: {ids}")
    index = None
    if cfg.index is not None:
        index = load_series(cfg.index, cfg.schema, None, cfg.interval, cfg.calendar, cfg.holidays)
    ds = Dataset(cfg, assets, index)
    if cfg.mode == "st":
        ds.market = StockMarket(assets, index, cfg.lookback, cfg.normalize_indicators)
        return ds
    pairs = []
    for a in assets:
        pairs.extend(order_tasks_from_bars(a, cfg.horizon, cfg.history, cfg.side, cfg.quantity))
    if not pairs:
        raise ConfigError("no complete order horizons in the data")
    pairs.sort(key=lambda p: (p[0], p[1].order_id))
    ds.tasks = [t for _, t in pairs]
    ds.task_times = {t.order_id: ts for ts, t in pairs}
    return ds


# --------------------------------------------------------------------------- pieces


def build_template(cfg: RunConfig, k: int) -> SketchTemplate:
    mode = SINGLE if k == 1 else Mode.ensemble(k)
    if cfg.sketch == "default":
        return default_template(mode)
    return parse_sketch(Path(cfg.sketch).read_text(encoding="utf-8"), mode)


def _objective(cfg: RunConfig) -> Objective:
    return Objective("discounted_reward", cfg.gamma) if cfg.mode == "oe" else SHARPE


def _train_env(cfg: RunConfig, ds: Dataset, split: RollingSplit):
    if cfg.mode == "oe":
        tasks = ds.window_tasks(split.train)
        if not tasks:
            raise ConfigError(f"training window {split.train} holds no orders")
        return OrderExecutionEnv(tasks, cfg.n_actions, cfg.alpha, cfg.gamma, cfg.lookback, cfg.normalize_indicators)
    # toy learners train on account returns; the gross trade reward only ever favours selling
    return StockTradingEnv(ds.market, cfg.st_config(), ds.window_bars(split.train), cfg.n_actions, cfg.gamma,
                           reward="return")


def base_policy(cfg: RunConfig, ds: Dataset, split_index: int, split: RollingSplit):
    """The frozen base: external logit files, or toy REINFORCE policies trained
    on the split's training window (one per ensemble member)."""
    if cfg.uses_toy_policy:
        env = _train_env(cfg, ds, split)
        members = [train_toy_policy(env, cfg.toy_episodes, stage_seed(cfg.seed, "toy", split_index, j),
                                    cfg.toy_lr, policy_id=f"toy{j}") for j in range(cfg.toy_members)]
    else:
        members = [load_external_policy(p) for p in cfg.policy_sources]
    for m in members:
        if m.n_actions != cfg.n_actions:
            raise ConfigError(f"policy {m.policy_id} has {m.n_actions} actions, config says {cfg.n_actions}")
    return members[0] if len(members) == 1 else EnsemblePolicy(members, "ensemble")


def _n_members(cfg: RunConfig) -> int:
    return cfg.toy_members if cfg.uses_toy_policy else len(cfg.policy_sources)


def _bounds(cfg: RunConfig, ds: Dataset, template: SketchTemplate, split: RollingSplit):
    if cfg.mode == "st":
        lo, hi = ds.market.index_range(split.train)
        feats = ds.market.market[lo:hi]
    else:
        rows = [market_feature_matrix(np.asarray(t.history + t.prices), cfg.lookback, cfg.normalize_indicators)
                for t in ds.window_tasks(split.train)]
        if not rows:
            raise ConfigError(f"training window {split.train} holds no orders")
        feats = np.vstack(rows)
    bounds = threshold_bounds(template, feats)
    for name, (lo_, hi_) in cfg.search.items():
        try:
            i = int(name.removeprefix("threshold_"))
        except ValueError:
            raise ConfigError(f"search override {name!r}: only threshold_<i> holes have bounds") from None
        if not 0 <= i < len(bounds):
            raise ConfigError(f"search override {name!r}: template has {len(bounds)} thresholds")
        bounds[i] = (lo_, hi_)
    return bounds


def _validation(cfg: RunConfig, ds: Dataset, split_index: int, split: RollingSplit):
    seed = stage_seed(cfg.seed, "validation", split_index)
    if cfg.mode == "oe":
        tasks = ds.window_tasks(split.validation)
        if not tasks:
            raise ConfigError(f"validation window {split.validation} holds no orders")
        return OEValidation(tasks, cfg.n_actions, cfg.alpha, seed, cfg.lookback, cfg.normalize_indicators)
    return STValidation(ds.market, ds.window_bars(split.validation), cfg.st_config(), seed)


def _check_test_windows(splits: Sequence[RollingSplit]) -> None:
    for a, b in zip(splits, splits[1:]):
        if b.test[0] < a.test[1]:
            raise ConfigError(f"test windows {a.test} and {b.test} overlap; use step >= test length")


# --------------------------------------------------------------------------- fit


def _write_trials(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_fit(cfg: RunConfig, out_dir: Path | None = None) -> list[Path]:
    """Fit the sketch on every rolling split; one parameter file and one
    trial-history file per split, plus ``fit_status.json``."""
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    splits = ds.splits()
    template = build_template(cfg, _n_members(cfg))
    objective = _objective(cfg)
    written: list[Path] = []
    status = {"splits": len(splits), "completed": [], "failed": None, "error": None}
    for i, split in enumerate(splits):
        try:
            base = base_policy(cfg, ds, i, split)
            bounds = _bounds(cfg, ds, template, split)
            data = _validation(cfg, ds, i, split)
            fit = fit_sketch(template, base, data, objective, bounds, cfg.budget, stage_seed(cfg.seed, "bo", i))
        except Exception as exc:
            status.update(failed=i, error=f"{type(exc).__name__}: {exc}")
            _write_json(out / "fit_status.json", status)
            log.error("split %d failed; %d parameter files written before it", i, len(written))
            raise
        history = fit.history()
        path = out / f"params_split{i}.json"
        write_params(path, fit.params, template, {
            "split": i,
            "windows": split.to_dict(),
            "objective": {"kind": objective.kind, "gamma": objective.gamma, "value": fit.value},
            "budget": cfg.budget,
            "trials": history,
        })
        _write_trials(out / f"trials_split{i}.csv", history)
        written.append(path)
        status["completed"].append(i)
        log.info("split %d: objective %.6g after %d trials", i, fit.value, len(history))
    _write_json(out / "fit_status.json", status)
    return written


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- backtest


def _load_fitted(paths: Sequence[Path], template: SketchTemplate, n_splits: int) -> dict[int, tuple]:
    fitted = {}
    for p in paths:
        doc = json.loads(Path(p).read_text(encoding="utf-8"))
        params, _ = read_params(p, template)
        split = int(doc.get("split", 0))
        if not 0 <= split < n_splits:
            raise ConfigError(f"{p}: split {split} does not exist under this config ({n_splits} splits)")
        if split in fitted:
            raise ConfigError(f"two parameter files for split {split}")
        fitted[split] = (params, doc)
    return fitted


def _oe_seed_run(cfg, ds, split_runs, strategy, seed):
    results, timeline = [], []
    for i, split, policy in split_runs:
        rng = np.random.default_rng(stage_seed(cfg.seed, "sample", seed, i))
        for task in ds.window_tasks(split.test):
            if strategy == "twap":
                ep = run_oe_episode(task, twap_schedule(task.T), cfg.gamma, cfg.alpha)
            elif strategy == "vwap":
                past = [t.volumes for t in ds.tasks
                        if t.asset_id == task.asset_id and ds.task_times[t.order_id] < ds.task_times[task.order_id]]
                ep = run_oe_episode(task, vwap_schedule(past[-VWAP_HISTORY_DAYS:] or [[0.0] * task.T], task.T),
                                    cfg.gamma, cfg.alpha)
            else:
                ep = run_oe_episode(task, policy, cfg.gamma, cfg.alpha, rng, cfg.n_actions, cfg.lookback,
                                    cfg.normalize_indicators)
            results.append(OEOrderResult(task.order_id, ep.avg_price, task.mean_price, task.side))
            timeline.extend([task.order_id, t, label.value] for t, label in enumerate(ep.trends) if label is not None)
    if not results:
        raise ConfigError("test windows hold no orders")
    m = oe_metrics(results, cfg.periods_per_year)
    return {"metrics": m.to_dict(), "orders": [[r.order_id, r.pa] for r in results], "timeline": timeline}


def _st_seed_run(cfg, ds, split_runs, strategy, seed):
    st_cfg = cfg.st_config()
    ts_all, values, timeline = [], [], []
    for i, split, policy in split_runs:
        lo, hi = ds.window_bars(split.test)
        if strategy == "index":
            if ds.index is None:
                raise ConfigError("the index strategy needs [data] index")
            seg_ts, seg = ds.market.timestamps[lo:hi], ds.index.closes[lo:hi]
        elif strategy == "buy_and_hold":
            bh = buy_and_hold(ds.market.closes[lo:hi], st_cfg.initial_capital, fee_rate=st_cfg.fee_rate,
                              quantity_decimals=st_cfg.quantity_decimals, timestamps=ds.market.timestamps[lo:hi])
            seg_ts, seg = bh.timestamps, bh.values
        else:
            rng = np.random.default_rng(stage_seed(cfg.seed, "sample", seed, i))
            ep = run_st_episode(ds.market, policy, st_cfg, (lo, hi), rng)
            seg_ts, seg = ep.timestamps, ep.values
            timeline.extend([int(t), label.value] for t, label in ep.trends if label is not None)
        # chain the windows: each starts from the previous window's final value
        scale = values[-1] / seg[0] if values else 1.0
        ts_all.extend(int(t) for t in seg_ts)
        values.extend(float(v) * scale for v in seg)
    curve = EquityCurve(np.array(ts_all), np.array(values), st_cfg.periods_per_year)
    m = st_metrics(curve)
    return {"metrics": m.to_dict(), "curve": {"timestamps": ts_all, "values": values}, "timeline": timeline}


def aggregate(seed_entries: list[dict], columns: Sequence[str]) -> dict:
    """Mean and sample std (ddof=1; 0 for one seed) of each metric across seeds."""
    out = {}
    for c in columns:
        v = np.array([e["metrics"][c] for e in seed_entries], dtype=float)
        with np.errstate(invalid="ignore"):
            mean = float(np.mean(v))
            std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        out[c] = {"mean": mean, "std": std}
    return out


def cmd_backtest(cfg: RunConfig, params_paths: Sequence[Path] = (), strategy: str = "tuned",
                 label: str | None = None) -> dict:
    """Run ``strategy`` over every split's test window for each seed."""
    if strategy not in STRATEGIES[cfg.mode]:
        raise ConfigError(f"strategy {strategy!r} is not available in {cfg.mode} mode "
                          f"(choose from {', '.join(STRATEGIES[cfg.mode])})")
    ds = load_dataset(cfg)
    splits = ds.splits()
    _check_test_windows(splits)
    k = _n_members(cfg)
    template = build_template(cfg, k)
    fitted = {}
    if strategy == "tuned":
        if not params_paths:
            raise ConfigError("the tuned strategy needs parameter files (run fit first)")
        fitted = _load_fitted(params_paths, template, len(splits))
        missing = sorted(set(range(len(splits))) - set(fitted))
        if missing:
            raise ConfigError(f"no parameter files for splits {missing}")

    split_runs = []
    for i, split in enumerate(splits):
        policy = None
        if strategy in ("tuned", "base"):
            base = base_policy(cfg, ds, i, split)
            policy = tuned_policy(base, template, fitted[i][0]) if strategy == "tuned" else base
        split_runs.append((i, split, policy))

    run = _oe_seed_run if cfg.mode == "oe" else _st_seed_run
    seeds = []
    for s in cfg.seeds:
        entry = {"seed": s}
        entry.update(run(cfg, ds, split_runs, strategy, s))
        seeds.append(entry)
    columns = METRIC_COLUMNS[cfg.mode]
    return {
        "format": REPORT_FORMAT,
        "version": 1,
        "artifact_version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "mode": cfg.mode,
        "market": cfg.market,
        "strategy": strategy,
        "label": label or strategy,
        "periods_per_year": cfg.periods_per_year,
        "test_windows": [list(s.test) for s in splits],
        "config": cfg.echo(),
        "sketch": template.mode.kind,
        "params": {str(i): fitted[i][0].to_named() for i in sorted(fitted)},
        "trials": {str(i): fitted[i][1].get("trials", []) for i in sorted(fitted)},
        "seeds": seeds,
        "aggregate": aggregate(seeds, columns),
    }


def write_report(report: dict, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    path.with_suffix(".txt").write_text(render_report(report), encoding="utf-8")


def read_report(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ComparisonError(f"{path}: cannot read report ({exc})") from None
    if doc.get("format") != REPORT_FORMAT:
        raise ComparisonError(f"{path}: not a run report")
    if doc.get("version") != 1:
        raise ComparisonError(f"{path}: unsupported report version {doc.get('version')}")
    return doc


def _fmt(x: float) -> str:
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        return str(x)
    return f"{x:.4f}"


def render_report(report: dict) -> str:
    cols = METRIC_COLUMNS[report["mode"]]
    lines = [f"strategy: {report['label']} ({report['mode']}, {report['market']})",
             f"test windows: {report['test_windows']}", ""]
    lines.append("seed\t" + "\t".join(cols))
    for e in report["seeds"]:
        lines.append(f"{e['seed']}\t" + "\t".join(_fmt(e["metrics"][c]) for c in cols))
    agg = report["aggregate"]
    lines.append("mean\t" + "\t".join(_fmt(agg[c]["mean"]) for c in cols))
    lines.append("std\t" + "\t".join(_fmt(agg[c]["std"]) for c in cols))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- report


def read_curve(path: Path) -> EquityCurve:
    """Read an exported equity-curve file back (``# periods_per_year=`` header)."""
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline()
        ppy = float(first.split("=", 1)[1]) if first.startswith("#") else 252
        rows = list(csv.reader(fh))
    body = rows[1:]
    return EquityCurve(np.array([int(r[0]) for r in body]), np.array([float(r[1]) for r in body]), ppy)


def _export_curve(path: Path, entry: dict, ppy: float) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# periods_per_year={ppy!r}\n")
        w = csv.writer(fh)
        w.writerow(["timestamp", "value"])
        for t, v in zip(entry["curve"]["timestamps"], entry["curve"]["values"]):
            w.writerow([t, repr(float(v))])


def _labels(reports: list[dict], paths: list[Path]) -> list[str]:
    labels = [r.get("label", r["strategy"]) for r in reports]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}:{Path(p).stem}" for lab, p in zip(labels, paths)]
    return labels


def cmd_report(paths: Sequence[Path], out_dir: Path, plots: bool = True) -> list[dict]:
    """Comparison table (rows = strategies) plus per-seed curve exports."""
    if not paths:
        raise ComparisonError("need at least one report")
    paths = [Path(p) for p in paths]
    reports = [read_report(p) for p in paths]
    modes = {r["mode"] for r in reports}
    if len(modes) > 1:
        raise ComparisonError(f"cannot compare reports of different modes: {sorted(modes)}")
    mode = modes.pop()
    ref = reports[0]["test_windows"]
    for p, r in zip(paths[1:], reports[1:]):
        if r["test_windows"] != ref:
            raise ComparisonError(f"{paths[0]} covers test windows {ref} but {p} covers {r['test_windows']}")
    cols = METRIC_COLUMNS[mode]
    labels = _labels(reports, paths)
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    rows = []
    for lab, r in zip(labels, reports):
        row = {"strategy": lab}
        for c in cols:
            row[c] = r["aggregate"][c]["mean"]
            row[f"{c}_std"] = r["aggregate"][c]["std"]
        rows.append(row)
        safe = lab.replace("/", "_").replace(":", "_")
        for e in r["seeds"]:
            if mode == "st":
                _export_curve(out / "curves" / f"{safe}_seed{e['seed']}.csv", e, r["periods_per_year"])
            else:
                with (out / "curves" / f"{safe}_seed{e['seed']}_pa.csv").open("w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh)
                    w.writerow(["order_id", "pa_bps"])
                    w.writerows([oid, repr(float(pa))] for oid, pa in e["orders"])
    with (out / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in rows)
    width = max(len("strategy"), *(len(r["strategy"]) for r in rows))
    text = ["strategy".ljust(width) + "".join(f"{c:>22}" for c in cols)]
    for row in rows:
        cells = "".join(f"{_fmt(row[c]) + ' ± ' + _fmt(row[c + '_std']):>22}" for c in cols)
        text.append(row["strategy"].ljust(width) + cells)
    (out / "comparison.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    if plots:
        from .plotting import render_figures

        render_figures(reports, labels, out)
    return rows


def dump_indicators(cfg: RunConfig, out_dir: Path) -> list[Path]:
    """Per asset: timestamp, the sketch indicators of the asset's own closes
    and the nine state features (empty cells before warm-up)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .indicators import state_feature_matrix

    written = []
    for p in cfg.assets:
        a = load_series(p, cfg.schema, None, cfg.interval, cfg.calendar, cfg.holidays)
        mk = market_feature_matrix(a.closes, cfg.lookback, cfg.normalize_indicators)
        st = state_feature_matrix(a)
        path = out / f"{a.asset_id}_indicators.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "vol", "dr", "gr", *STATE_FEATURE_NAMES])
            for t in range(len(a)):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in (*mk[t], *st[t])]
                w.writerow([int(a.timestamps[t]), *cells])
        written.append(path)
    return written
