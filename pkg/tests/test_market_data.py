import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sketchtune.market_data import (
    AssetSeries,
    Bar,
    EmptySplitError,
    Months,
    ParseError,
    ValidationError,
    add_duration,
    check_calendar,
    day_grid,
    epoch,
    export_series,
    load_series,
    make_rolling_splits,
    parse_duration,
    slice_series,
)

HEADER = "timestamp,open,high,low,close,volume\n"


def write(tmp_path, rows, name="AAA.csv", header=HEADER):
    p = tmp_path / name
    p.write_text(header + "".join(r + "\n" for r in rows), encoding="utf-8")
    return p


def test_three_rows_load_in_order(tmp_path):
    p = write(tmp_path, ["1000,10,11,9,10.5,100", "1060,10.5,12,10,11,200", "1120,11,11.5,10.5,11.2,50"])
    s = load_series(p, interval="1min")
    assert len(s) == 3
    assert list(s.timestamps) == [1000, 1060, 1120]
    assert s.asset_id == "AAA"
    assert s.closes[1] == 11.0


def test_high_below_low_names_row_two(tmp_path):
    p = write(tmp_path, ["1000,10,11,9,10.5,100", "1060,10.5,9,10,9.5,200"])
    with pytest.raises(ValidationError) as err:
        load_series(p)
    assert err.value.row == 2
    assert "row 2" in str(err.value)


def test_out_of_order_rows_equal_sorted_ingestion(tmp_path):
    rows = ["1000,10,11,9,10.5,100", "1060,10.5,12,10,11,200", "1120,11,11.5,10.5,11.2,50"]
    a = load_series(write(tmp_path, rows, "A.csv"))
    b = load_series(write(tmp_path, [rows[2], rows[0], rows[1]], "A2.csv"), asset_id="A")
    assert a.bars == b.bars


def test_duplicate_timestamp_rejected(tmp_path):
    p = write(tmp_path, ["1000,10,11,9,10.5,100", "1000,10,11,9,10.5,100"])
    with pytest.raises(ValidationError):
        load_series(p)


def test_non_positive_price_rejected(tmp_path):
    p = write(tmp_path, ["1000,10,11,9,10.5,100", "1060,0,12,0,11,200"])
    with pytest.raises(ValidationError):
        load_series(p)


def test_malformed_row_reports_line(tmp_path):
    p = write(tmp_path, ["1000,10,11,9,10.5,100", "1060,abc,12,10,11,200"])
    with pytest.raises(ParseError) as err:
        load_series(p)
    assert err.value.line == 3  # header is line 1


def test_schema_maps_columns(tmp_path):
    p = write(tmp_path, ["2021-01-04,10,11,9,10.5,100"], header="Date,O,H,L,C,V\n")
    s = load_series(p, schema={"timestamp": "Date", "open": "O", "high": "H", "low": "L", "close": "C",
                               "volume": "V"})
    assert s.timestamps[0] == epoch("2021-01-04")


def test_missing_column_is_parse_error(tmp_path):
    p = write(tmp_path, ["1000,10,11,9,100"], header="timestamp,open,high,low,volume\n")
    with pytest.raises(ParseError):
        load_series(p)


def test_bar_invariants():
    assert Bar(0, 1, 2, 0.5, 1.5, 0).problems() == []
    assert Bar(0, 1, 0.9, 0.5, 1.5, 0).problems()
    assert Bar(0, 1, 2, 0.5, 1.5, -1).problems()


def test_calendar_gap_is_an_error():
    ts = day_grid("2021-01-04", 5, "weekdays")
    del ts[2]
    with pytest.raises(ValidationError):
        AssetSeries.from_arrays("X", 86400, ts, [1.0] * 4, [1.0] * 4, [1.0] * 4, [1.0] * 4, [0.0] * 4,
                                calendar="weekdays")


def test_weekday_calendar_accepts_weekends_gap():
    ts = day_grid("2021-01-01", 10, "weekdays")
    s = AssetSeries.from_arrays("X", 86400, ts, [1.0] * 10, [1.0] * 10, [1.0] * 10, [1.0] * 10, [0.0] * 10,
                                calendar="weekdays")
    check_calendar(s)


def test_durations():
    assert parse_duration("3M") == Months(3)
    assert parse_duration("8h") == 8 * 3600
    assert parse_duration("1min") == 60
    assert parse_duration("20d") == 20 * 86400
    assert add_duration(epoch("2021-01-31"), Months(1)) == epoch("2021-02-28")
    with pytest.raises(ValueError):
        parse_duration("three months")


def test_rolling_splits_twelve_months_step_three():
    splits = make_rolling_splits((epoch("2020-01-01"), epoch("2021-01-01")), "6M", "1M", "1M", "3M")
    assert len(splits) == 2
    assert [s.test[0] for s in splits] == [epoch("2020-08-01"), epoch("2020-11-01")]
    # test windows at months 7 and 10, 0-based
    assert splits[0].train == (epoch("2020-01-01"), epoch("2020-07-01"))


def test_rolling_splits_exact_range_gives_one():
    splits = make_rolling_splits((epoch("2020-01-01"), epoch("2020-09-01")), "6M", "1M", "1M", "3M")
    assert len(splits) == 1


def test_rolling_splits_monthly_step_on_ten_months():
    splits = make_rolling_splits((epoch("2020-01-01"), epoch("2020-11-01")), "6M", "1M", "1M", "1M")
    assert len(splits) == 3
    for a, b in zip(splits, splits[1:]):
        assert add_duration(a.train[0], Months(1)) == b.train[0]
        assert a.test[1] == b.test[0]  # gap-free when test length = step
    assert all(s.test[1] <= epoch("2020-11-01") for s in splits)


def test_rolling_splits_too_short():
    with pytest.raises(EmptySplitError):
        make_rolling_splits((epoch("2020-01-01"), epoch("2020-06-01")), "6M", "1M", "1M", "1M")


def _series(n=10):
    ts = list(range(0, 60 * n, 60))
    c = np.linspace(10, 11, n)
    return AssetSeries.from_arrays("S", 60, ts, c, c + 0.1, c - 0.1, c, np.ones(n))


def test_slice_examples():
    s = _series()
    assert slice_series(s, (0, 600)).bars == s.bars
    assert len(slice_series(s, (1000, 2000))) == 0
    assert slice_series(s, (0, 120)).timestamps.tolist() == [0, 60]  # bar at end excluded


@given(st.integers(-100, 700), st.integers(0, 800))
def test_slice_idempotent(a, width):
    s = _series()
    w = (a, a + width)
    once = slice_series(s, w)
    assert slice_series(once, w).bars == once.bars


@given(st.lists(st.floats(1e-6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_export_round_trip_bit_exact(tmp_path_factory, closes):
    tmp = tmp_path_factory.mktemp("rt")
    n = len(closes)
    c = np.array(closes)
    s = AssetSeries.from_arrays("RT", 60, list(range(0, 60 * n, 60)), c, c * 1.01, c * 0.99, c, np.arange(n) * 0.5)
    export_series(s, tmp / "RT.csv")
    back = load_series(tmp / "RT.csv", interval=60)
    assert back.bars == s.bars
