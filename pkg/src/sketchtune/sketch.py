"""Market-trend program sketch: template, rule-file grammar, holes and interpreter.

A sketch is an ordered list of conditionals, one per trend, each a conjunction
of ``indicator < ?`` / ``indicator > ?`` clauses whose right-hand sides are
threshold holes. Every trend (including the ``else`` branch, oscillation)
owns a directive hole: a softmax temperature for a single policy or a weight
vector over ``k`` sub-policies for an ensemble.

Rule file grammar (one rule per line, ``#`` starts a comment)::

    steady_descend <- (vol < ?) & (dr > ?)
    ...
    else -> oscillation
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .indicators import MarketFeatures

__all__ = [
    "TrendLabel",
    "Mode",
    "SINGLE",
    "Clause",
    "Conditional",
    "SketchTemplate",
    "SketchParams",
    "TuningDirective",
    "SketchError",
    "SketchSyntaxError",
    "UnknownIndicatorError",
    "DuplicateTrendError",
    "MissingDefaultError",
    "ParameterizationError",
    "ConfigurationError",
    "INDICATORS",
    "default_template",
    "parse_sketch",
    "render_sketch",
    "interpret",
    "write_params",
    "read_params",
]

INDICATORS = ("vol", "dr", "gr")
PARAMS_FORMAT = "sketchtune.sketch-params"


class SketchError(Exception):
    pass


class SketchSyntaxError(SketchError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class UnknownIndicatorError(SketchSyntaxError):
    pass


class DuplicateTrendError(SketchSyntaxError):
    pass


class MissingDefaultError(SketchError):
    pass


class ParameterizationError(SketchError):
    pass


class ConfigurationError(SketchError):
    pass


class TrendLabel(str, Enum):
    STEADY_DESCEND = "steady_descend"
    STEADY_ASCEND = "steady_ascend"
    RAPID_DESCEND = "rapid_descend"
    RAPID_ASCEND = "rapid_ascend"
    OSCILLATION = "oscillation"

    @property
    def direction(self) -> int:
        """+1 ascending, -1 descending, 0 oscillation."""
        if self in (TrendLabel.STEADY_ASCEND, TrendLabel.RAPID_ASCEND):
            return 1
        if self in (TrendLabel.STEADY_DESCEND, TrendLabel.RAPID_DESCEND):
            return -1
        return 0


@dataclass(frozen=True)
class Mode:
    kind: str = "single"
    k: int = 1

    def __post_init__(self):
        if self.kind not in ("single", "ensemble"):
            raise ConfigurationError(f"unknown mode {self.kind!r}")
        if self.kind == "ensemble" and self.k < 2:
            raise ConfigurationError(f"ensemble mode needs k >= 2 sub-policies, got {self.k}")
        if self.kind == "single" and self.k != 1:
            raise ConfigurationError("single mode has exactly one policy")

    @classmethod
    def ensemble(cls, k: int) -> "Mode":
        return cls("ensemble", k)

    @property
    def is_ensemble(self) -> bool:
        return self.kind == "ensemble"

    @property
    def directive_size(self) -> int:
        return self.k if self.is_ensemble else 1

    def __str__(self):
        return f"ensemble({self.k})" if self.is_ensemble else "single"


SINGLE = Mode()


@dataclass(frozen=True)
class Clause:
    indicator: str
    op: str
    hole: int

    def holds(self, value: float, threshold: float) -> bool:
        return value < threshold if self.op == "<" else value > threshold


@dataclass(frozen=True)
class Conditional:
    trend: TrendLabel
    clauses: tuple[Clause, ...]
    directive: int

    def holds(self, features: MarketFeatures, thresholds: Sequence[float]) -> bool:
        return all(c.holds(features.get(c.indicator), thresholds[c.hole]) for c in self.clauses)


@dataclass(frozen=True)
class SketchTemplate:
    conditionals: tuple[Conditional, ...]
    mode: Mode = SINGLE

    def __post_init__(self):
        conds = tuple(self.conditionals)
        object.__setattr__(self, "conditionals", conds)
        trends = [c.trend for c in conds]
        if sorted(trends) != sorted(TrendLabel):
            raise SketchError(f"each trend must appear exactly once, got {[t.value for t in trends]}")
        if conds[-1].trend is not TrendLabel.OSCILLATION or conds[-1].clauses:
            raise MissingDefaultError("oscillation must be the last, clause-free branch")
        for c in conds[:-1]:
            if not c.clauses:
                raise SketchError(f"{c.trend.value} has no clauses")
        holes = sorted(cl.hole for c in conds for cl in c.clauses)
        if holes != list(range(len(holes))):
            raise SketchError(f"threshold holes must be dense 0..H-1, got {holes}")
        if sorted(c.directive for c in conds) != list(range(len(conds))):
            raise SketchError("directive holes must be dense")

    @property
    def n_thresholds(self) -> int:
        return sum(len(c.clauses) for c in self.conditionals)

    @property
    def trends(self) -> tuple[TrendLabel, ...]:
        return tuple(c.trend for c in self.conditionals)

    @property
    def n_holes(self) -> int:
        """Total scalar count: thresholds plus every directive component."""
        return self.n_thresholds + len(self.conditionals) * self.mode.directive_size

    def threshold_indicators(self) -> list[str]:
        """Indicator name owning each threshold hole, by hole index."""
        out = [""] * self.n_thresholds
        for c in self.conditionals:
            for cl in c.clauses:
                out[cl.hole] = cl.indicator
        return out

    def with_mode(self, mode: Mode) -> "SketchTemplate":
        return SketchTemplate(self.conditionals, mode)

    def structure(self) -> tuple:
        return tuple((c.trend, c.clauses, c.directive) for c in self.conditionals)


def default_template(mode: Mode = SINGLE) -> SketchTemplate:
    """The five-trend sketch: descends detected by downside risk, ascends by
    growth rate, steady vs rapid by the volatility comparator."""
    return parse_sketch(DEFAULT_RULES, mode)


DEFAULT_RULES = """\
steady_descend <- (vol < ?) & (dr > ?)
rapid_descend <- (vol > ?) & (dr > ?)
steady_ascend <- (vol < ?) & (gr > ?)
rapid_ascend <- (vol > ?) & (gr > ?)
else -> oscillation
"""

_TOKEN = re.compile(r"\s*(?:(<-|->)|([()&<>?])|([A-Za-z_][A-Za-z0-9_]*)|(\S))")


def _tokens(line: str):
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None or m.end() == pos:
            break
        col = m.start(m.lastindex) + 1
        text = m.group(m.lastindex)
        kind = {1: "arrow", 2: "punct", 3: "name", 4: "bad"}[m.lastindex]
        yield kind, text, col
        pos = m.end()


class _LineParser:
    def __init__(self, line: str, lineno: int):
        self.toks = list(_tokens(line))
        self.i = 0
        self.lineno = lineno
        self.eol_col = len(line.rstrip()) + 1

    def error(self, msg, col=None, cls=SketchSyntaxError):
        if col is None:
            col = self.toks[self.i][2] if self.i < len(self.toks) else self.eol_col
        return cls(msg, self.lineno, col)

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None, self.eol_col)

    def expect(self, kind, text=None):
        tok = self.peek()
        if tok[0] != kind or (text is not None and tok[1] != text):
            want = text or kind
            got = "end of line" if tok[0] is None else repr(tok[1])
            raise self.error(f"expected {want!r}, got {got}")
        self.i += 1
        return tok

    def done(self):
        if self.i < len(self.toks):
            raise self.error(f"unexpected {self.toks[self.i][1]!r}")


def _trend(name: str, p: _LineParser, col: int) -> TrendLabel:
    try:
        return TrendLabel(name)
    except ValueError:
        raise p.error(f"unknown trend {name!r}", col) from None


def parse_sketch(text: str, mode: Mode = SINGLE) -> SketchTemplate:
    """Parse a rule file into a template; holes are numbered in reading order."""
    conditionals: list[Conditional] = []
    seen: dict[TrendLabel, int] = {}
    default: Conditional | None = None
    hole = 0
    last_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        last_line = lineno
        p = _LineParser(line, lineno)
        if default is not None:
            raise p.error("rules after the else branch", p.peek()[2])
        _, head, head_col = p.expect("name")
        if head == "else":
            p.expect("arrow", "->")
            _, name, col = p.expect("name")
            trend = _trend(name, p, col)
            if trend is not TrendLabel.OSCILLATION:
                raise p.error("the else branch must be oscillation", col)
            if trend in seen:
                raise p.error("duplicate trend 'oscillation'", col, DuplicateTrendError)
            p.done()
            default = Conditional(trend, (), len(conditionals))
            continue
        trend = _trend(head, p, head_col)
        if trend is TrendLabel.OSCILLATION:
            raise p.error("oscillation is the else branch, write 'else -> oscillation'", head_col)
        if trend in seen:
            raise p.error(f"duplicate trend {trend.value!r} (first on line {seen[trend]})",
                          head_col, DuplicateTrendError)
        seen[trend] = lineno
        p.expect("arrow", "<-")
        clauses = []
        while True:
            p.expect("punct", "(")
            _, ind, col = p.expect("name")
            if ind not in INDICATORS:
                raise p.error(f"unknown indicator {ind!r}; expected one of {', '.join(INDICATORS)}",
                              col, UnknownIndicatorError)
            tok = p.peek()
            if tok[1] not in ("<", ">"):
                raise p.error("expected comparator '<' or '>'")
            p.i += 1
            p.expect("punct", "?")
            p.expect("punct", ")")
            clauses.append(Clause(ind, tok[1], hole))
            hole += 1
            if p.peek()[1] == "&":
                p.i += 1
                continue
            break
        p.done()
        conditionals.append(Conditional(trend, tuple(clauses), len(conditionals)))

    if default is None:
        raise MissingDefaultError(
            f"missing default branch 'else -> oscillation' (after line {last_line})"
        )
    missing = [t.value for t in TrendLabel if t not in seen and t is not TrendLabel.OSCILLATION]
    if missing:
        raise SketchError(f"trends without a rule: {', '.join(missing)}")
    conditionals.append(default)
    return SketchTemplate(tuple(conditionals), mode)


def render_sketch(template: SketchTemplate) -> str:
    lines = []
    for c in template.conditionals:
        if not c.clauses:
            lines.append(f"else -> {c.trend.value}")
        else:
            body = " & ".join(f"({cl.indicator} {cl.op} ?)" for cl in c.clauses)
            lines.append(f"{c.trend.value} <- {body}")
    return "\n".join(lines) + "\n"


Directive = Union[float, tuple[float, ...]]


@dataclass(frozen=True)
class TuningDirective:
    trend: TrendLabel
    payload: Directive

    @property
    def temperature(self) -> float:
        if isinstance(self.payload, tuple):
            raise TypeError("ensemble directive carries weights, not a temperature")
        return self.payload

    @property
    def weights(self) -> np.ndarray:
        if not isinstance(self.payload, tuple):
            raise TypeError("single-model directive carries a temperature, not weights")
        return np.asarray(self.payload)


@dataclass(frozen=True)
class SketchParams:
    """Filled holes: thresholds by hole index, one directive per trend."""

    thresholds: tuple[float, ...]
    directives: Mapping[TrendLabel, Directive]

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        d = {}
        for trend, value in self.directives.items():
            trend = TrendLabel(trend)
            if isinstance(value, (list, tuple, np.ndarray)):
                d[trend] = tuple(float(v) for v in value)
            else:
                d[trend] = float(value)
        object.__setattr__(self, "directives", d)

    @property
    def n_scalars(self) -> int:
        return len(self.thresholds) + sum(
            len(v) if isinstance(v, tuple) else 1 for v in self.directives.values()
        )

    def validate(self, template: SketchTemplate, tol: float = 1e-6) -> None:
        if len(self.thresholds) != template.n_thresholds:
            raise ParameterizationError(
                f"template has {template.n_thresholds} threshold holes, params give {len(self.thresholds)}"
            )
        if not all(math.isfinite(x) for x in self.thresholds):
            raise ParameterizationError("thresholds must be finite")
        if set(self.directives) != set(template.trends):
            raise ParameterizationError("params must give a directive for every trend")
        mode = template.mode
        for trend, value in self.directives.items():
            if mode.is_ensemble:
                if not isinstance(value, tuple) or len(value) != mode.k:
                    raise ParameterizationError(f"{trend.value}: expected {mode.k} weights, got {value!r}")
                w = np.asarray(value)
                if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
                    raise ParameterizationError(f"{trend.value}: weights must be >= 0 and sum to 1")
            else:
                if isinstance(value, tuple) or not (value > 0 and math.isfinite(value)):
                    raise ParameterizationError(f"{trend.value}: temperature must be a positive scalar")

    def to_named(self) -> dict[str, float]:
        out = {f"threshold_{i}": x for i, x in enumerate(self.thresholds)}
        for trend, value in self.directives.items():
            if isinstance(value, tuple):
                out.update({f"phi_{trend.value}_{i}": w for i, w in enumerate(value)})
            else:
                out[f"phi_{trend.value}"] = value
        return out

    @classmethod
    def from_named(cls, named: Mapping[str, float], template: SketchTemplate) -> "SketchParams":
        try:
            thresholds = tuple(named[f"threshold_{i}"] for i in range(template.n_thresholds))
            directives: dict[TrendLabel, Directive] = {}
            for trend in template.trends:
                if template.mode.is_ensemble:
                    directives[trend] = tuple(named[f"phi_{trend.value}_{i}"] for i in range(template.mode.k))
                else:
                    directives[trend] = named[f"phi_{trend.value}"]
        except KeyError as exc:
            raise ParameterizationError(f"parameter file lacks {exc.args[0]}") from None
        params = cls(thresholds, directives)
        params.validate(template)
        return params

    @classmethod
    def identity(cls, template: SketchTemplate, thresholds: Sequence[float]) -> "SketchParams":
        """All temperatures 1, or uniform ensemble weights."""
        k = template.mode.k
        value: Directive = tuple([1.0 / k] * k) if template.mode.is_ensemble else 1.0
        return cls(tuple(thresholds), {t: value for t in template.trends})


def interpret(template: SketchTemplate, params: SketchParams, features: MarketFeatures,
              validate: bool = True) -> TuningDirective:
    """First conditional (in declaration order) whose clauses all hold wins;
    otherwise the trailing oscillation branch applies."""
    if validate:
        params.validate(template)
    for cond in template.conditionals:
        if cond.holds(features, params.thresholds):
            return TuningDirective(cond.trend, params.directives[cond.trend])
    raise AssertionError("unreachable: the default branch always holds")


def classify(template: SketchTemplate, thresholds: Sequence[float], features: MarketFeatures) -> TrendLabel:
    for cond in template.conditionals:
        if cond.holds(features, thresholds):
            return cond.trend
    raise AssertionError("unreachable")


def write_params(path: str | Path, params: SketchParams, template: SketchTemplate, extra: dict | None = None) -> None:
    doc = {
        "format": PARAMS_FORMAT,
        "version": 1,
        "mode": template.mode.kind,
        "k": template.mode.k,
        "sketch": render_sketch(template),
        "params": params.to_named(),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_params(path: str | Path, template: SketchTemplate | None = None) -> tuple[SketchParams, SketchTemplate]:
    """Load a parameter file; the template embedded in the file is used unless
    one is given, in which case the two must agree."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != PARAMS_FORMAT:
        raise ParameterizationError(f"{path}: not a sketch parameter file")
    mode = Mode(doc["mode"], int(doc["k"]))
    embedded = parse_sketch(doc["sketch"], mode)
    if template is not None:
        if template.structure() != embedded.structure() or template.mode != mode:
            raise ConfigurationError(f"{path}: parameters were fitted for a different sketch or mode")
    else:
        template = embedded
    return SketchParams.from_named(doc["params"], template), template
