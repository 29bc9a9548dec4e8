import csv
import json
import math

import numpy as np
import pytest

from sketchtune.cli import main
from sketchtune.config import ConfigError, load_config, stage_seed
from sketchtune.metrics import st_metrics
from sketchtune.pipeline import aggregate, load_dataset, read_curve
from sketchtune.sketch import DEFAULT_RULES, classify, read_params


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def st_demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("st")
    assert main(["demo", "--out", str(root), "--seed", "0"]) == 0
    cfg = root / "config.ini"
    assert main(["fit", "--config", str(cfg), "--out", str(root / "fit"), "--budget", "4"]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def oe_demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("oe")
    assert main(["demo", "--out", str(root), "--mode", "oe"]) == 0
    return root, root / "config.ini"


def same_metrics(a, b):
    assert a.keys() == b.keys()
    for k in a:
        if isinstance(a[k], float) and math.isnan(a[k]):
            assert math.isnan(b[k])
        else:
            assert a[k] == b[k], k


def test_fit_is_byte_deterministic(st_demo, tmp_path):
    root, cfg = st_demo
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path), "--budget", "4"]) == 0
    first = sorted((root / "fit").glob("*"))
    assert [p.name for p in first] == sorted(p.name for p in tmp_path.glob("*"))
    for p in first:
        assert p.read_bytes() == (tmp_path / p.name).read_bytes(), p.name


def test_fit_never_regresses_on_probes(st_demo):
    root, _ = st_demo
    for path in sorted((root / "fit").glob("params_split*.json")):
        doc = json.loads(path.read_text())
        probes = [t["objective"] for t in doc["trials"] if t["source"] == "probe"]
        assert len(probes) == 4  # identity + three one-hots
        assert doc["objective"]["value"] >= max(probes)
        assert len(doc["trials"]) == doc["budget"] == 4


def test_two_member_fit_beats_both_one_hots(tmp_path):
    assert main(["demo", "--out", str(tmp_path), "--seed", "2"]) == 0
    cfg = tmp_path / "config.ini"
    cfg.write_text(cfg.read_text().replace("members = 3", "members = 2"))
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "fit"), "--budget", "3"]) == 0
    for path in sorted((tmp_path / "fit").glob("params_split*.json")):
        doc = json.loads(path.read_text())
        probes = [t["objective"] for t in doc["trials"] if t["source"] == "probe"]
        assert len(probes) == 3 and doc["objective"]["value"] >= max(probes[1:])


def test_budget_one_writes_identity(st_demo, tmp_path):
    _, cfg = st_demo
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path), "--budget", "1"]) == 0
    params, tpl = read_params(tmp_path / "params_split0.json")
    assert all(w == pytest.approx((1 / 3,) * 3) for w in params.directives.values())
    doc = json.loads((tmp_path / "params_split0.json").read_text())
    assert [t["source"] for t in doc["trials"]] == ["probe"]


def test_identity_backtest_equals_base(st_demo, tmp_path, capsys):
    _, cfg = st_demo
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "id"), "--budget", "1"]) == 0
    code, _, _ = run(capsys, "backtest", "--config", cfg, "--params-dir", tmp_path / "id", "--out", tmp_path / "t.json")
    assert code == 0
    code, _, _ = run(capsys, "backtest", "--config", cfg, "--strategy", "base", "--out", tmp_path / "b.json")
    assert code == 0
    tuned, base = (json.loads((tmp_path / n).read_text()) for n in ("t.json", "b.json"))
    for a, b in zip(tuned["seeds"], base["seeds"]):
        same_metrics(a["metrics"], b["metrics"])
        assert a["curve"] == b["curve"]


@pytest.fixture(scope="module")
def st_reports(st_demo):
    root, cfg = st_demo
    out = root / "reports"
    for strategy in ("tuned", "base", "buy_and_hold"):
        args = ["backtest", "--config", str(cfg), "--strategy", strategy, "--out", str(out / f"{strategy}.json")]
        if strategy == "tuned":
            args += ["--params-dir", str(root / "fit")]
        assert main(args) == 0
    return out


def test_report_aggregate_recomputes(st_reports):
    rep = json.loads((st_reports / "tuned.json").read_text())
    assert len(rep["seeds"]) == 3
    again = aggregate(rep["seeds"], ["AR", "CR", "AV", "MD", "SR"])
    assert json.dumps(again) == json.dumps(rep["aggregate"])
    assert (st_reports / "tuned.txt").read_text().startswith("strategy: tuned")


def test_timeline_reproduces_from_params(st_demo, st_reports):
    root, cfg_path = st_demo
    cfg = load_config(cfg_path)
    ds = load_dataset(cfg)
    rep = json.loads((st_reports / "tuned.json").read_text())
    expected = []
    for i, split in enumerate(ds.splits()):
        params, tpl = read_params(root / "fit" / f"params_split{i}.json")
        lo, hi = ds.window_bars(split.test)
        for t in range(lo, hi - 1):
            expected.append([int(ds.market.timestamps[t]), classify(tpl, params.thresholds, ds.market.market_at(t)).value])
    for entry in rep["seeds"]:
        assert entry["timeline"] == expected
    # one label per trading step of every window
    assert len(expected) == sum(len(e) - 1 for e in np.split(np.array(rep["seeds"][0]["curve"]["timestamps"]),
                                                             len(ds.splits())))


def test_report_single_row_matches(st_reports, tmp_path, capsys):
    code, out, _ = run(capsys, "report", st_reports / "tuned.json", "--out", tmp_path, "--no-plots")
    assert code == 0 and "tuned" in out
    rows = list(csv.DictReader((tmp_path / "comparison.csv").open()))
    rep = json.loads((st_reports / "tuned.json").read_text())
    assert len(rows) == 1
    for c in ("AR", "CR", "AV", "MD", "SR"):
        assert float(rows[0][c]) == rep["aggregate"][c]["mean"] or math.isnan(rep["aggregate"][c]["mean"])


def test_curve_export_round_trips_metrics(st_reports, tmp_path):
    paths = [st_reports / f"{s}.json" for s in ("tuned", "base", "buy_and_hold")]
    assert main(["report", *map(str, paths), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "equity.png").stat().st_size > 0
    rep = json.loads(paths[0].read_text())
    for entry in rep["seeds"]:
        m = st_metrics(read_curve(tmp_path / "curves" / f"tuned_seed{entry['seed']}.csv")).to_dict()
        same_metrics(m, entry["metrics"])
    assert len(list(csv.DictReader((tmp_path / "comparison.csv").open()))) == 3


def test_report_rejects_different_windows(st_reports, tmp_path, capsys):
    rep = json.loads((st_reports / "base.json").read_text())
    rep["test_windows"] = [[0, 86400]]
    other = tmp_path / "shifted.json"
    other.write_text(json.dumps(rep))
    code, _, err = run(capsys, "report", st_reports / "tuned.json", other, "--out", tmp_path / "r")
    assert code == 1
    assert str(json.loads((st_reports / "tuned.json").read_text())["test_windows"]) in err
    assert "[[0, 86400]]" in err


def test_report_rejects_mixed_modes(st_reports, tmp_path, capsys):
    rep = json.loads((st_reports / "base.json").read_text())
    rep["mode"] = "oe"
    (tmp_path / "oe.json").write_text(json.dumps(rep))
    code, _, _ = run(capsys, "report", st_reports / "base.json", tmp_path / "oe.json", "--out", tmp_path / "r")
    assert code == 1


def test_oe_twap_row_is_zero(oe_demo, tmp_path, capsys):
    _, cfg = oe_demo
    code, _, _ = run(capsys, "backtest", "--config", cfg, "--strategy", "twap", "--out", tmp_path / "twap.json")
    assert code == 0
    rep = json.loads((tmp_path / "twap.json").read_text())
    for c in ("PA", "ARR", "POS", "GLR"):
        assert rep["aggregate"][c]["mean"] == 0.0
    code, out, _ = run(capsys, "report", tmp_path / "twap.json", "--out", tmp_path / "r")
    assert code == 0 and (tmp_path / "r" / "pa_hist.png").exists()


def test_oe_fit_and_backtest(oe_demo, tmp_path, capsys):
    _, cfg = oe_demo
    assert run(capsys, "fit", "--config", cfg, "--out", tmp_path, "--budget", "2")[0] == 0
    code, _, _ = run(capsys, "backtest", "--config", cfg, "--params-dir", tmp_path, "--out", tmp_path / "t.json")
    assert code == 0
    rep = json.loads((tmp_path / "t.json").read_text())
    assert rep["mode"] == "oe" and all(len(e["orders"]) > 0 for e in rep["seeds"])


def test_ingest_prints_splits(st_demo, capsys):
    _, cfg = st_demo
    code, out, _ = run(capsys, "ingest", "--config", cfg)
    assert code == 0
    doc = json.loads(out)
    assert len(doc["assets"]) == 3 and len(doc["splits"]) == 3


def test_indicators_dump(st_demo, tmp_path, capsys):
    _, cfg = st_demo
    assert run(capsys, "indicators", "--config", cfg, "--out", tmp_path)[0] == 0
    header = (tmp_path / "SYN0_indicators.csv").read_text().splitlines()[0]
    assert header.startswith("timestamp,vol,dr,gr,macd")


def test_sketch_check(tmp_path, capsys):
    good = tmp_path / "rules.txt"
    good.write_text(DEFAULT_RULES)
    code, out, _ = run(capsys, "sketch", "check", good)
    assert code == 0 and "13 holes" in out
    code, out, _ = run(capsys, "sketch", "check", good, "--mode", "ensemble", "--k", "3")
    assert code == 0 and "23 holes" in out
    bad = tmp_path / "bad.txt"
    bad.write_text(DEFAULT_RULES.replace("dr >", "momentum >", 1))
    code, _, err = run(capsys, "sketch", "check", bad)
    assert code == 1 and "momentum" in err and "line 1" in err


def test_exit_codes(st_demo, tmp_path, capsys, monkeypatch):
    _, cfg = st_demo
    assert run(capsys, "fit", "--config", tmp_path / "missing.ini")[0] == 1
    assert run(capsys, "fit")[0] == 1  # usage error
    assert run(capsys, "backtest", "--config", cfg)[0] == 1  # tuned needs params
    bad = tmp_path / "bad.ini"
    bad.write_text(cfg.read_text().replace("[run]", "[run]\nbudget = 0").replace(
        "SYN0.csv", str(cfg.parent / "SYN0.csv")).replace("SYN1.csv", str(cfg.parent / "SYN1.csv")).replace(
        "SYN2.csv", str(cfg.parent / "SYN2.csv")))
    assert run(capsys, "fit", "--config", bad)[0] == 1

    def boom(*a, **k):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr("sketchtune.cli.cmd_fit", boom)
    code, _, err = run(capsys, "fit", "--config", cfg)
    assert code == 2 and "simulated failure" in err


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "a.csv").write_text("timestamp,open,high,low,close,volume\n0,1,1,1,1,0\n")
    (tmp_path / "c.ini").write_text("[data]\nassets = a.csv\n[env]\nfees = 0.1\n")
    with pytest.raises(ConfigError, match="fees"):
        load_config(tmp_path / "c.ini")
    (tmp_path / "c.ini").write_text("[data]\nassets = a.csv\n[run]\nmarket = crypto\n")
    cfg = load_config(tmp_path / "c.ini")
    assert cfg.annual_rate == 0.1712 and cfg.periods_per_year == 1095 and cfg.cap_notional == 100_000


def test_stage_seeds_are_independent():
    assert stage_seed(0, "bo", 1) != stage_seed(0, "toy", 1)
    assert stage_seed(0, "bo", 1) == stage_seed(0, "bo", 1)
    assert stage_seed(0, "bo", 1) != stage_seed(0, "bo", 2)


def test_readme_config_example_parses(tmp_path):
    import re
    from pathlib import Path

    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    text = re.search(r"```ini\n(.*?)```", readme, re.S).group(1)
    for name in ("AAA.csv", "BBB.csv", "INDEX.csv"):
        (tmp_path / name).write_text("Date,open,high,low,Close,volume\n")
    (tmp_path / "c.ini").write_text(text)
    cfg = load_config(tmp_path / "c.ini")
    assert cfg.schema == {"timestamp": "Date", "close": "Close"}
    assert cfg.alpha == 0.01 and cfg.calendar == "weekdays" and cfg.policy_sources == []
    assert cfg.search == {"threshold_0": (0.0, 5.0)} and cfg.seeds == [0, 1, 2, 3, 4]
