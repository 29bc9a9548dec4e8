"""Gaussian-process Bayesian optimisation of the sketch holes.

Search coordinates: thresholds are searched directly inside percentile
bounds, temperatures as ``log10`` in ``[-1, 1]``, and ensemble weights
through ``k - 1`` stick-breaking fractions per trend so every decoded
weight vector lies exactly on the simplex.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

from .env import OrderTask, STConfig, StockMarket, run_oe_episode, run_st_episode
from .indicators import market_feature_matrix
from .metrics import EquityCurve, sharpe_ratio
from .sketch import INDICATORS, SketchParams, SketchTemplate

__all__ = [
    "SearchSpace",
    "SketchSpace",
    "Trial",
    "OptimizeResult",
    "GaussianProcess",
    "expected_improvement",
    "optimize",
    "Objective",
    "DISCOUNTED_REWARD",
    "SHARPE",
    "OEValidation",
    "STValidation",
    "EvaluationError",
    "evaluate_policy",
    "evaluate_sketch_objective",
    "threshold_bounds",
    "probe_set",
    "fit_sketch",
    "FitResult",
    "market_bounds_from_closes",
]

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 20
TEMPERATURE_LOG10_BOUNDS = (-1.0, 1.0)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    lower: np.ndarray
    upper: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("bounds must satisfy lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i}" for i in range(len(lo))))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def to_unit(self, x) -> np.ndarray:
        span = self.upper - self.lower
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (np.asarray(x) - self.lower) / safe, 0.5)

    def from_unit(self, u) -> np.ndarray:
        x = self.lower + np.asarray(u) * (self.upper - self.lower)
        return np.clip(x, self.lower, self.upper)

    @property
    def blocks(self) -> list[np.ndarray]:
        """Coordinate groups that belong to one hole; one per coordinate here."""
        return [np.array([i]) for i in range(self.dim)]


def _stick_decode(v: np.ndarray) -> tuple[float, ...]:
    rem = 1.0
    out = []
    for vi in v:
        w = rem * float(vi)
        out.append(w)
        rem = rem - w
    out.append(max(rem, 0.0))
    return tuple(out)


def _stick_encode(w: Sequence[float]) -> list[float]:
    rem = 1.0
    out = []
    for wi in w[:-1]:
        out.append(0.0 if rem <= 0 else min(1.0, max(0.0, wi / rem)))
        rem -= wi
    return out


class SketchSpace(SearchSpace):
    """Coordinates for a sketch template; ``decode`` yields valid params."""

    def __init__(self, template: SketchTemplate, bounds: Sequence[tuple[float, float]]):
        if len(bounds) != template.n_thresholds:
            raise ValueError(f"need {template.n_thresholds} threshold bounds, got {len(bounds)}")
        lo = [float(b[0]) for b in bounds]
        hi = [float(b[1]) for b in bounds]
        names = [f"threshold_{i}" for i in range(template.n_thresholds)]
        mode = template.mode
        for trend in template.trends:
            if mode.is_ensemble:
                for i in range(mode.k - 1):
                    lo.append(0.0)
                    hi.append(1.0)
                    names.append(f"stick_{trend.value}_{i}")
            else:
                lo.append(TEMPERATURE_LOG10_BOUNDS[0])
                hi.append(TEMPERATURE_LOG10_BOUNDS[1])
                names.append(f"log10_phi_{trend.value}")
        super().__init__(np.array(lo), np.array(hi), tuple(names))
        object.__setattr__(self, "template", template)

    @property
    def blocks(self) -> list[np.ndarray]:
        """Each threshold alone, then each trend's directive coordinates."""
        t = self.template
        n = t.n_thresholds
        per = t.mode.k - 1 if t.mode.is_ensemble else 1
        out = [np.array([i]) for i in range(n)]
        out += [np.arange(n + j * per, n + (j + 1) * per) for j in range(len(t.trends))]
        return out

    def decode(self, x) -> SketchParams:
        t = self.template
        x = np.asarray(x, dtype=float)
        n = t.n_thresholds
        thresholds = tuple(float(v) for v in x[:n])
        directives = {}
        pos = n
        for trend in t.trends:
            if t.mode.is_ensemble:
                directives[trend] = _stick_decode(x[pos:pos + t.mode.k - 1])
                pos += t.mode.k - 1
            else:
                directives[trend] = float(10.0 ** x[pos])
                pos += 1
        return SketchParams(thresholds, directives)

    def encode(self, params: SketchParams) -> np.ndarray:
        t = self.template
        out = list(params.thresholds)
        for trend in t.trends:
            d = params.directives[trend]
            if t.mode.is_ensemble:
                out.extend(_stick_encode(d))
            else:
                out.append(math.log10(d))
        return np.array(out)


def threshold_bounds(template: SketchTemplate, features: np.ndarray,
                     percentiles: tuple[float, float] = (1.0, 99.0)) -> list[tuple[float, float]]:
    """Per threshold hole, the percentile range of its indicator over the
    rows of ``features`` (columns vol, dr, gr; NaN rows ignored)."""
    f = np.asarray(features, dtype=float)
    f = f[~np.isnan(f).any(axis=1)]
    if len(f) == 0:
        raise EvaluationError("no indicator values to derive threshold bounds from")
    out = []
    for ind in template.threshold_indicators():
        col = f[:, INDICATORS.index(ind)]
        lo, hi = np.percentile(col, percentiles)
        if not hi > lo:
            hi = lo + max(abs(lo) * 0.1, 1e-9)
        out.append((float(lo), float(hi)))
    return out


def probe_set(template: SketchTemplate, space: SketchSpace) -> list[SketchParams]:
    """Identity tuning (temperatures 1 or uniform weights) at mid-bound
    thresholds, plus one all-trends one-hot point per ensemble member."""
    mid = tuple(((space.lower + space.upper) / 2)[: template.n_thresholds])
    probes = [SketchParams.identity(template, mid)]
    if template.mode.is_ensemble:
        k = template.mode.k
        for i in range(k):
            w = tuple(1.0 if j == i else 0.0 for j in range(k))
            probes.append(SketchParams(mid, {t: w for t in template.trends}))
    return probes


# --------------------------------------------------------------------------- GP


class GaussianProcess:
    """Zero-mean GP on standardised targets with an ARD squared-exponential
    kernel; length-scales and amplitude maximise the log marginal likelihood."""

    def __init__(self, jitter: float = 1e-8, n_restarts: int = 3, seed: int = 0):
        self.jitter = jitter
        self.n_restarts = n_restarts
        self.seed = seed

    def _kernel(self, A, B, log_ls, log_amp):
        ls = np.exp(log_ls)
        d = (A[:, None, :] - B[None, :, :]) / ls
        return np.exp(2 * log_amp) * np.exp(-0.5 * np.sum(d * d, axis=-1))

    def _nll(self, theta, X, y):
        """Negative log marginal likelihood and its gradient in ``theta``."""
        log_ls, log_amp = theta[:-1], theta[-1]
        n = len(X)
        diff = (X[:, None, :] - X[None, :, :]) / np.exp(log_ls)
        sq = diff * diff
        K0 = np.exp(2 * log_amp) * np.exp(-0.5 * sq.sum(axis=-1))
        K = K0 + self.jitter * np.eye(n)
        try:
            c = cho_factor(K, lower=True)
        except np.linalg.LinAlgError:
            return 1e10, np.zeros_like(theta)
        alpha = cho_solve(c, y)
        nll = 0.5 * y @ alpha + np.log(np.diag(c[0])).sum() + 0.5 * n * np.log(2 * np.pi)
        W = cho_solve(c, np.eye(n)) - np.outer(alpha, alpha)
        grad = np.empty_like(theta)
        grad[:-1] = 0.5 * np.einsum("ij,ijk->k", W * K0, sq)
        grad[-1] = np.sum(W * K0)
        return float(nll), grad

    def fit(self, X, y, fit_hyper: bool = True) -> "GaussianProcess":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        self.y_mean = y.mean()
        self.y_std = y.std() if y.std() > 0 else 1.0
        ys = (y - self.y_mean) / self.y_std
        d = X.shape[1]
        theta = np.concatenate([np.full(d, np.log(0.5)), [0.0]])
        if fit_hyper and len(X) >= 2:
            rng = np.random.default_rng(self.seed)
            bounds = [(np.log(0.01), np.log(10.0))] * d + [(np.log(0.1), np.log(10.0))]
            lo = np.array([b[0] for b in bounds])
            hi = np.array([b[1] for b in bounds])
            starts = [theta] + [rng.uniform(lo, hi) for _ in range(self.n_restarts - 1)]
            best = (self._nll(theta, X, ys)[0], theta)
            for s in starts:
                res = minimize(self._nll, s, args=(X, ys), jac=True, method="L-BFGS-B", bounds=bounds)
                if np.isfinite(res.fun) and res.fun < best[0]:
                    best = (float(res.fun), np.clip(res.x, lo, hi))
            theta = best[1]
        self.theta = theta
        self.X = X
        K = self._kernel(X, X, theta[:-1], theta[-1]) + self.jitter * np.eye(len(X))
        self._chol = cho_factor(K, lower=True)
        self._alpha = cho_solve(self._chol, ys)
        return self

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation in the original units."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Ks = self._kernel(Xq, self.X, self.theta[:-1], self.theta[-1])
        mu = Ks @ self._alpha
        v = cho_solve(self._chol, Ks.T)
        var = np.exp(2 * self.theta[-1]) - np.sum(Ks * v.T, axis=1)
        sd = np.sqrt(np.clip(var, 1e-18, None))
        return mu * self.y_std + self.y_mean, sd * self.y_std


def expected_improvement(mu, sd, best: float, xi: float = 0.0) -> np.ndarray:
    mu, sd = np.asarray(mu), np.asarray(sd)
    z = (mu - best - xi) / sd
    return (mu - best - xi) * norm.cdf(z) + sd * norm.pdf(z)


# --------------------------------------------------------------------------- BO loop


@dataclass(frozen=True)
class Trial:
    index: int
    x: np.ndarray
    value: float
    source: str


@dataclass
class OptimizeResult:
    best_x: np.ndarray
    best_value: float
    trials: list[Trial] = field(default_factory=list)

    @property
    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate([t.value for t in self.trials])


def _crossover(U: np.ndarray, y: np.ndarray, blocks, rng, n: int, top: int = 4) -> np.ndarray:
    """Candidates assembled block by block from the best evaluated points."""
    parents = U[np.argsort(-y)[:top]]
    out = np.empty((n, U.shape[1]))
    for idx in blocks:
        out[:, idx] = parents[rng.integers(len(parents), size=n)][:, idx]
    return out


def _propose(gp: GaussianProcess, U: np.ndarray, y: np.ndarray, rng, n_candidates: int,
             blocks=None) -> np.ndarray:
    d = U.shape[1]
    best = y.max()
    cands = rng.random((n_candidates, d))
    if blocks is not None and len(U) >= 2:
        cands = np.vstack([cands, _crossover(U, y, blocks, rng, n_candidates // 4)])
    ei = expected_improvement(*gp.predict(cands), best)
    # local refinement around the incumbents and the best random candidates
    seeds = np.vstack([U[np.argsort(-y)[:3]], cands[np.argsort(-ei)[:5]]])
    pool, pool_ei = cands, ei
    for scale in (0.2, 0.08, 0.03):
        local = np.clip(seeds[rng.integers(len(seeds), size=256)] + rng.normal(0, scale, (256, d)), 0, 1)
        local_ei = expected_improvement(*gp.predict(local), best)
        pool = np.vstack([pool, local])
        pool_ei = np.concatenate([pool_ei, local_ei])
        seeds = np.vstack([seeds[:3], pool[np.argsort(-pool_ei)[:5]]])
    return pool[int(np.argmax(pool_ei))]


def optimize(space: SearchSpace, objective: Callable[[np.ndarray], float], budget: int = DEFAULT_BUDGET,
             seed: int = 0, probes: Sequence[np.ndarray] = (), n_init: int | None = None,
             n_candidates: int = 1024) -> OptimizeResult:
    """Maximise ``objective`` over ``space`` with exactly ``budget`` evaluations.

    ``probes`` are evaluated first (in order), then random points until
    ``n_init`` trials exist, then expected-improvement proposals. Non-finite
    objective values are recorded as ``-inf`` and left out of the GP.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    if n_init is None:
        n_init = len(probes) + 2
    n_init = max(n_init, len(probes), 1)
    trials: list[Trial] = []

    def run(x, source):
        x = np.clip(np.asarray(x, dtype=float), space.lower, space.upper)
        value = float(objective(x))
        if not np.isfinite(value):
            value = -math.inf
        trials.append(Trial(len(trials), x, value, source))

    for p in probes:
        if len(trials) >= budget:
            break
        run(p, "probe")
    while len(trials) < min(n_init, budget):
        run(space.from_unit(rng.random(space.dim)), "random")
    while len(trials) < budget:
        finite = [t for t in trials if np.isfinite(t.value)]
        if len(finite) < 2:
            run(space.from_unit(rng.random(space.dim)), "random")
            continue
        U = space.to_unit(np.array([t.x for t in finite]))
        y = np.array([t.value for t in finite])
        gp = GaussianProcess(seed=int(rng.integers(2**31))).fit(U, y)
        run(space.from_unit(_propose(gp, U, y, rng, n_candidates, space.blocks)), "ei")

    best = max(trials, key=lambda t: t.value)
    return OptimizeResult(best.x, best.value, trials)


# --------------------------------------------------------------------------- objectives


@dataclass(frozen=True)
class Objective:
    kind: str
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("discounted_reward", "sharpe"):
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == "discounted_reward" and not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


DISCOUNTED_REWARD = Objective("discounted_reward", 1.0)
SHARPE = Objective("sharpe")


@dataclass
class OEValidation:
    tasks: Sequence[OrderTask]
    n_actions: int
    alpha: float = 0.01
    seed: int = 0
    lookback: int = 14
    normalize: bool = False


@dataclass
class STValidation:
    market: StockMarket
    window: tuple[int, int]
    config: STConfig
    seed: int = 0


def evaluate_policy(policy, data, objective: Objective) -> float:
    """Objective of ``policy`` on validation data with a fixed sampling seed:
    mean discounted return over orders, or the Sharpe ratio of the equity curve."""
    rng = np.random.default_rng(data.seed)
    if isinstance(data, OEValidation):
        if not data.tasks:
            raise EvaluationError("empty validation set")
        returns = []
        for task in data.tasks:
            if len(task.history) < data.lookback:
                raise EvaluationError(f"order {task.order_id}: {len(task.history)} history bars, need {data.lookback}")
            ep = run_oe_episode(task, policy, objective.gamma, data.alpha, rng, data.n_actions,
                                data.lookback, data.normalize)
            returns.append(ep.discounted_return)
        return float(np.mean(returns))
    start, end = data.window
    if end - start < 2:
        raise EvaluationError(f"validation window [{start}, {end}) is too short")
    if start < data.market.warmup:
        raise EvaluationError(f"validation starts at bar {start}, indicators need {data.market.warmup}")
    ep = run_st_episode(data.market, policy, data.config, (start, end), rng)
    if objective.kind == "sharpe":
        curve = EquityCurve(ep.timestamps, ep.values, data.config.periods_per_year)
        return sharpe_ratio(curve.returns, curve.periods_per_year)
    return float(np.sum(ep.rewards * objective.gamma ** np.arange(len(ep.rewards))))


def evaluate_sketch_objective(template: SketchTemplate, params: SketchParams, base, data,
                              objective: Objective) -> float:
    from .policy import tuned_policy

    return evaluate_policy(tuned_policy(base, template, params), data, objective)


@dataclass
class FitResult:
    params: SketchParams
    value: float
    space: SketchSpace
    result: OptimizeResult

    def history(self) -> list[dict]:
        rows = []
        for t in self.result.trials:
            row = {"index": t.index, "source": t.source, "objective": t.value}
            row.update(self.space.decode(t.x).to_named())
            rows.append(row)
        return rows


def fit_sketch(template: SketchTemplate, base, data, objective: Objective,
               bounds: Sequence[tuple[float, float]], budget: int = DEFAULT_BUDGET, seed: int = 0) -> FitResult:
    space = SketchSpace(template, bounds)
    probes = [space.encode(p) for p in probe_set(template, space)]

    def f(x):
        return evaluate_sketch_objective(template, space.decode(x), base, data, objective)

    res = optimize(space, f, budget, seed, probes)
    return FitResult(space.decode(res.best_x), res.best_value, space, res)


def market_bounds_from_closes(template: SketchTemplate, closes, lookback: int = 14,
                              normalize: bool = False) -> list[tuple[float, float]]:
    return threshold_bounds(template, market_feature_matrix(closes, lookback, normalize))

