"""Report figures rendered to PNG files (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["render_figures", "TREND_COLORS"]

TREND_COLORS = {
    "rapid_ascend": "#1a9850",
    "steady_ascend": "#91cf60",
    "oscillation": "#f0f0f0",
    "steady_descend": "#fc8d59",
    "rapid_descend": "#d73027",
}


def _dates(ts):
    return np.asarray(ts, dtype="datetime64[s]")


def _equity(reports, labels, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(9, 4.5))
    for lab, r in zip(labels, reports):
        curves = [np.asarray(e["curve"]["values"]) for e in r["seeds"]]
        ts = _dates(r["seeds"][0]["curve"]["timestamps"])
        mean = np.mean([c / c[0] for c in curves], axis=0)
        ax.plot(ts, mean, label=lab, lw=1.2)
    ax.set_ylabel("account value (start = 1, mean over seeds)")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _timeline(report, label, path: Path) -> None:
    entries = report["seeds"][0]["timeline"]
    curve = report["seeds"][0]["curve"]
    ts = _dates(curve["timestamps"])
    fig, ax = plt.subplots(figsize=(9, 4.5))
    ax.plot(ts, np.asarray(curve["values"]), color="black", lw=1.0)
    by_t = {int(t): lab for t, lab in entries}
    raw = np.asarray(curve["timestamps"])
    width = np.median(np.diff(raw)) if len(raw) > 1 else 86400
    for t in raw:
        lab = by_t.get(int(t))
        if lab is not None and lab != "oscillation":
            start = np.datetime64(int(t), "s")
            ax.axvspan(start, start + np.timedelta64(int(width), "s"), color=TREND_COLORS[lab], alpha=0.35, lw=0)
    handles = [plt.Rectangle((0, 0), 1, 1, color=c, alpha=0.5) for c in TREND_COLORS.values()]
    ax.legend(handles, list(TREND_COLORS), loc="best", fontsize=7)
    ax.set_title(f"{label}: identified market trends (seed {report['seeds'][0]['seed']})")
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _pa_hist(reports, labels, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for lab, r in zip(labels, reports):
        pa = np.concatenate([np.asarray([p for _, p in e["orders"]], dtype=float) for e in r["seeds"]])
        ax.hist(pa, bins=40, alpha=0.5, label=lab)
    ax.set_xlabel("price advantage per order (bps)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(reports: list[dict], labels: list[str], out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    if reports[0]["mode"] == "st":
        written.append(out_dir / "equity.png")
        _equity(reports, labels, written[-1])
        for lab, r in zip(labels, reports):
            if r["seeds"][0]["timeline"]:
                safe = lab.replace("/", "_").replace(":", "_")
                written.append(out_dir / f"trends_{safe}.png")
                _timeline(r, lab, written[-1])
    else:
        written.append(out_dir / "pa_hist.png")
        _pa_hist(reports, labels, written[-1])
    return written
