"""Market data ingestion, windowing and rolling train/validation/test splits.

Series are loaded from comma-separated files (one asset per file) and kept
immutable. Durations are either integer seconds or calendar months
(:class:`Months`), so that "3 months" steps follow the calendar rather than
a fixed number of seconds.
"""

from __future__ import annotations

import calendar
import csv
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Bar",
    "AssetSeries",
    "RollingSplit",
    "Months",
    "MarketDataError",
    "ParseError",
    "ValidationError",
    "EmptySplitError",
    "DEFAULT_SCHEMA",
    "parse_duration",
    "add_duration",
    "parse_timestamp",
    "load_series",
    "export_series",
    "make_rolling_splits",
    "slice_series",
]

FIELDS = ("timestamp", "open", "high", "low", "close", "volume")
DEFAULT_SCHEMA = {name: name for name in FIELDS}


class MarketDataError(Exception):
    pass


class ParseError(MarketDataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(MarketDataError):
    def __init__(self, message: str, row: int | None = None):
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)
        self.row = row


class EmptySplitError(MarketDataError):
    pass


@dataclass(frozen=True)
class Months:
    """A calendar-month duration."""

    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("Months must be positive")

    def __str__(self):
        return f"{self.n}M"


Duration = Union[int, Months]

_DURATION_RE = re.compile(r"^\s*(\d+)\s*([smhdwM]|min)?\s*$")
_UNIT_SECONDS = {"s": 1, "min": 60, "m": 60, "h": 3600, "d": 86400, "w": 7 * 86400}


def parse_duration(value: str | int | Months) -> Duration:
    """Parse ``"3M"`` (months), ``"8h"``, ``"20d"``, ``"1min"`` or plain seconds."""
    if isinstance(value, (Months, int)) and not isinstance(value, bool):
        return value
    match = _DURATION_RE.match(str(value))
    if not match:
        raise ValueError(f"cannot parse duration {value!r}")
    n, unit = int(match.group(1)), match.group(2) or "s"
    if unit == "M":
        return Months(n)
    return n * _UNIT_SECONDS[unit]


def _add_months(ts: int, n: int) -> int:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    month0 = dt.month - 1 + n
    year = dt.year + month0 // 12
    month = month0 % 12 + 1
    day = min(dt.day, calendar.monthrange(year, month)[1])
    return int(dt.replace(year=year, month=month, day=day).timestamp())


def add_duration(ts: int, duration: Duration, times: int = 1) -> int:
    if isinstance(duration, Months):
        return _add_months(ts, duration.n * times)
    return ts + duration * times


def parse_timestamp(text: str) -> int:
    """Integer epoch seconds, or an ISO-8601 date/datetime interpreted as UTC."""
    text = text.strip()
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


@dataclass(frozen=True)
class Bar:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float

    def problems(self) -> list[str]:
        out = []
        for name in ("open", "high", "low", "close"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                out.append(f"non-positive price {name}={value}")
        if self.volume < 0 or not np.isfinite(self.volume):
            out.append(f"negative volume {self.volume}")
        if self.low > min(self.open, self.close):
            out.append(f"low {self.low} above min(open, close)")
        if self.high < max(self.open, self.close):
            out.append(f"high {self.high} below max(open, close)")
        if self.high < self.low:
            out.append(f"high {self.high} < low {self.low}")
        return out


@dataclass(frozen=True)
class AssetSeries:
    """Time-ordered bars for one asset at one interval.

    ``calendar`` declares which gaps are legitimate: ``"continuous"`` means
    every step equals ``interval``; ``"weekdays"`` skips Saturdays, Sundays
    and the dates in ``holidays``; ``None`` disables the gap check.
    """

    asset_id: str
    interval: int
    bars: tuple[Bar, ...]
    calendar: str | None = None
    holidays: frozenset[date] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "bars", tuple(self.bars))
        ts = [b.timestamp for b in self.bars]
        for i in range(1, len(ts)):
            if ts[i] <= ts[i - 1]:
                raise ValidationError("timestamps not strictly increasing", row=i + 1)
        if self.calendar is not None:
            check_calendar(self)

    def __len__(self):
        return len(self.bars)

    @cached_property
    def timestamps(self) -> np.ndarray:
        return np.array([b.timestamp for b in self.bars], dtype=np.int64)

    @cached_property
    def closes(self) -> np.ndarray:
        return np.array([b.close for b in self.bars], dtype=float)

    @cached_property
    def highs(self) -> np.ndarray:
        return np.array([b.high for b in self.bars], dtype=float)

    @cached_property
    def lows(self) -> np.ndarray:
        return np.array([b.low for b in self.bars], dtype=float)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.array([b.volume for b in self.bars], dtype=float)

    def with_bars(self, bars: Iterable[Bar]) -> "AssetSeries":
        return AssetSeries(self.asset_id, self.interval, tuple(bars), self.calendar, self.holidays)

    @classmethod
    def from_arrays(cls, asset_id, interval, timestamps, opens, highs, lows, closes, volumes, **kw):
        bars = tuple(
            Bar(int(t), float(o), float(h), float(lo), float(c), float(v))
            for t, o, h, lo, c, v in zip(timestamps, opens, highs, lows, closes, volumes)
        )
        for i, bar in enumerate(bars, start=1):
            problems = bar.problems()
            if problems:
                raise ValidationError("; ".join(problems), row=i)
        return cls(asset_id, int(interval), bars, **kw)


def _next_expected(ts: int, series: AssetSeries) -> int:
    nxt = ts + series.interval
    if series.calendar == "weekdays":
        while True:
            day = datetime.fromtimestamp(nxt, tz=timezone.utc).date()
            if day.weekday() < 5 and day not in series.holidays:
                break
            nxt += 86400
    return nxt


def check_calendar(series: AssetSeries) -> None:
    if series.calendar not in ("continuous", "weekdays"):
        raise ValueError(f"unknown calendar {series.calendar!r}")
    ts = [b.timestamp for b in series.bars]
    for i in range(1, len(ts)):
        expected = _next_expected(ts[i - 1], series)
        if ts[i] != expected:
            raise ValidationError(
                f"missing bar: expected timestamp {expected}, found {ts[i]}", row=i + 1
            )


def load_series(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    asset_id: str | None = None,
    interval: Duration | str | None = None,
    calendar: str | None = None,
    holidays: Iterable[str | date] = (),
) -> AssetSeries:
    """Load one asset from a comma-separated file with a header row.

    ``schema`` maps the canonical field names (timestamp, open, high, low,
    close, volume) to the header names used in the file. Rows may appear in
    any order; duplicates and invariant violations are rejected, with row
    numbers counted from 1 over the data rows.
    """
    path = Path(path)
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        try:
            cols = {f: header.index(schema[f]) for f in FIELDS}
        except ValueError as exc:
            raise ParseError(f"column not found: {exc}", 1) from None

        bars: list[tuple[int, Bar]] = []
        for row_no, row in enumerate(reader, start=1):
            line = row_no + 1
            if not row or all(not c.strip() for c in row):
                continue
            try:
                bar = Bar(
                    parse_timestamp(row[cols["timestamp"]]),
                    *(float(row[cols[f]]) for f in FIELDS[1:]),
                )
            except (ValueError, IndexError) as exc:
                raise ParseError(f"malformed row: {exc}", line) from None
            problems = bar.problems()
            if problems:
                raise ValidationError("; ".join(problems), row=row_no)
            bars.append((row_no, bar))

    bars.sort(key=lambda rb: rb[1].timestamp)
    for (_, prev), (row_no, bar) in zip(bars, bars[1:]):
        if bar.timestamp == prev.timestamp:
            raise ValidationError(f"duplicate timestamp {bar.timestamp}", row=row_no)

    ordered = tuple(b for _, b in bars)
    if interval is None:
        diffs = np.diff([b.timestamp for b in ordered])
        interval = int(diffs.min()) if len(diffs) else 0
    interval = parse_duration(interval)
    if isinstance(interval, Months):
        raise ValueError("bar interval must be a fixed number of seconds")
    hol = frozenset(d if isinstance(d, date) else date.fromisoformat(d) for d in holidays)
    return AssetSeries(asset_id or path.stem, interval, ordered, calendar, hol)


def _fmt(x: float) -> str:
    return repr(float(x))


def export_series(series: AssetSeries, path: str | Path, schema: Mapping[str, str] | None = None) -> None:
    """Write ``series`` in the same tabular format ``load_series`` reads.

    Floats are written with ``repr`` so prices round-trip bit-exactly.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([schema[f] for f in FIELDS])
        for b in series.bars:
            writer.writerow([b.timestamp, _fmt(b.open), _fmt(b.high), _fmt(b.low), _fmt(b.close), _fmt(b.volume)])


@dataclass(frozen=True)
class RollingSplit:
    train: tuple[int, int]
    validation: tuple[int, int]
    test: tuple[int, int]
    step: Duration

    def __post_init__(self):
        if not (self.train[0] < self.train[1] <= self.validation[0] < self.validation[1]
                <= self.test[0] < self.test[1]):
            raise ValueError(f"overlapping or empty windows in {self}")

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation),
                "test": list(self.test), "step": str(self.step)}


def make_rolling_splits(
    series_range: tuple[int, int],
    train_len: Duration | str,
    val_len: Duration | str,
    test_len: Duration | str,
    step: Duration | str,
) -> list[RollingSplit]:
    """Walk-forward splits: contiguous train, validation and test windows
    advanced by ``step`` until the test window would leave ``series_range``."""
    train_len, val_len, test_len, step = map(parse_duration, (train_len, val_len, test_len, step))
    for d in (train_len, val_len, test_len, step):
        if isinstance(d, int) and d <= 0:
            raise ValueError("durations must be positive")
    start, end = series_range
    splits = []
    i = 0
    while True:
        t0 = add_duration(start, step, i)
        t1 = add_duration(t0, train_len)
        t2 = add_duration(t1, val_len)
        t3 = add_duration(t2, test_len)
        if t3 > end:
            break
        splits.append(RollingSplit((t0, t1), (t1, t2), (t2, t3), step))
        i += 1
    if not splits:
        raise EmptySplitError(
            f"range [{start}, {end}) too short for train {train_len} + val {val_len} + test {test_len}"
        )
    return splits


def slice_series(series: AssetSeries, window: Sequence[int]) -> AssetSeries:
    """Bars with ``start <= timestamp < end``."""
    start, end = window
    if start > end:
        raise ValueError(f"malformed window {window}")
    ts = series.timestamps
    lo, hi = np.searchsorted(ts, start, "left"), np.searchsorted(ts, end, "left")
    if lo == 0 and hi == len(series):
        return series
    return series.with_bars(series.bars[lo:hi])


def window_index(series: AssetSeries, window: Sequence[int]) -> tuple[int, int]:
    """Bar index range ``[lo, hi)`` covered by ``window``."""
    ts = series.timestamps
    return int(np.searchsorted(ts, window[0], "left")), int(np.searchsorted(ts, window[1], "left"))


def epoch(day: str) -> int:
    return int(datetime.fromisoformat(day).replace(tzinfo=timezone.utc).timestamp())


def day_grid(start: str, n: int, calendar: str = "continuous") -> list[int]:
    """``n`` daily UTC timestamps from ``start`` (weekdays only if requested)."""
    out, ts = [], epoch(start)
    while len(out) < n:
        if calendar != "weekdays" or datetime.fromtimestamp(ts, tz=timezone.utc).weekday() < 5:
            out.append(ts)
        ts += int(timedelta(days=1).total_seconds())
    return out
