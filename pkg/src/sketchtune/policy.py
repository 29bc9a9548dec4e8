"""Frozen policies and the two post-hoc tuning functions.

Policies map an :class:`Observation` to a ``(rows, m)`` array of logits, one
row per decision (one row in order execution, one per asset in stock
trading). Nothing here ever writes to a policy's weights; tuning only
reshapes the output distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Mapping, Protocol, Sequence

import numpy as np

from .indicators import MarketFeatures
from .sketch import (
    ConfigurationError,
    Mode,
    SketchParams,
    SketchTemplate,
    TrendLabel,
    TuningDirective,
    interpret,
)

__all__ = [
    "PolicyError",
    "DomainError",
    "NormalizationError",
    "FormatError",
    "MissingStateError",
    "Observation",
    "FrozenPolicy",
    "LinearPolicy",
    "ConstantPolicy",
    "TablePolicy",
    "EnsemblePolicy",
    "TunedPolicy",
    "softmax",
    "entropy",
    "temperature_tune",
    "ensemble_tune",
    "mix_distributions",
    "load_external_policy",
    "export_external_policy",
    "train_toy_policy",
    "tuned_policy",
]

LOGITS_FORMAT = "sketchtune.external-logits"


class PolicyError(Exception):
    pass


class DomainError(PolicyError, ValueError):
    pass


class NormalizationError(PolicyError, ValueError):
    pass


class FormatError(PolicyError):
    pass


class MissingStateError(PolicyError, KeyError):
    pass


@dataclass(frozen=True)
class Observation:
    """What a policy sees at one decision step.

    ``keys`` identify each row for lookup policies, ``features`` is the
    ``(rows, f)`` numeric view for parametric ones and ``market`` carries the
    sketch's indicator triple for the step.
    """

    keys: tuple[Hashable, ...]
    features: np.ndarray | None = None
    market: MarketFeatures | None = None
    t: int = 0
    timestamp: int = 0
    state_vector: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return len(self.keys)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(probs, axis: int = -1) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=axis)


def temperature_tune(logits, phi: float) -> np.ndarray:
    """Softmax of ``logits / phi``; phi > 1 flattens, phi < 1 sharpens."""
    if not (np.isfinite(phi) and phi > 0):
        raise DomainError(f"temperature must be a positive finite scalar, got {phi}")
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    return softmax(z / phi)


def mix_distributions(dists: Sequence[np.ndarray], weights, tol: float = 1e-6) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if len(w) != len(dists):
        raise NormalizationError(f"{len(w)} weights for {len(dists)} distributions")
    if np.any(w < 0) or abs(w.sum() - 1.0) > tol:
        raise NormalizationError(f"weights must be non-negative and sum to 1, got {w.tolist()}")
    out = w[0] * dists[0]
    for wi, d in zip(w[1:], dists[1:]):
        out = out + wi * d
    return out


class FrozenPolicy(Protocol):
    policy_id: str
    n_actions: int

    def logits(self, obs: Observation) -> np.ndarray: ...

    def distribution(self, obs: Observation) -> np.ndarray: ...


class _Base:
    policy_id: str
    n_actions: int

    def distribution(self, obs: Observation) -> np.ndarray:
        return softmax(self.logits(obs))

    def trend(self, obs: Observation) -> TrendLabel | None:
        return None


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class LinearPolicy(_Base):
    """Logits ``features @ weights.T + bias`` per row."""

    def __init__(self, weights, bias=None, policy_id: str = "linear"):
        self.weights = _frozen(weights)
        m = self.weights.shape[0]
        self.bias = _frozen(np.zeros(m) if bias is None else bias)
        self.n_actions = m
        self.policy_id = policy_id

    def logits(self, obs: Observation) -> np.ndarray:
        x = np.atleast_2d(obs.features)
        return x @ self.weights.T + self.bias


class ConstantPolicy(_Base):
    """Same logits for every row of every state."""

    def __init__(self, logits, policy_id: str = "constant"):
        self._logits = _frozen(logits)
        self.n_actions = len(self._logits)
        self.policy_id = policy_id

    def logits(self, obs: Observation) -> np.ndarray:
        return np.tile(self._logits, (obs.rows, 1))


class TablePolicy(_Base):
    """Stored logits keyed by state; unknown states raise."""

    def __init__(self, table: Mapping[Hashable, Sequence[float]], policy_id: str = "external"):
        lengths = {len(v) for v in table.values()}
        if len(lengths) > 1:
            raise FormatError(f"ragged logit vectors: lengths {sorted(lengths)}")
        if not table:
            raise FormatError("empty logits table")
        self.table = {k: _frozen(v) for k, v in table.items()}
        self.n_actions = lengths.pop()
        self.policy_id = policy_id

    def logits(self, obs: Observation) -> np.ndarray:
        try:
            return np.stack([self.table[k] for k in obs.keys])
        except KeyError as exc:
            raise MissingStateError(f"policy {self.policy_id!r} has no logits for state {exc.args[0]!r}") from None


@dataclass
class EnsemblePolicy:
    sub_policies: Sequence[FrozenPolicy]
    policy_id: str = "ensemble"

    def __post_init__(self):
        self.sub_policies = tuple(self.sub_policies)
        if len(self.sub_policies) < 2:
            raise ConfigurationError("an ensemble needs at least 2 sub-policies")
        sizes = {p.n_actions for p in self.sub_policies}
        if len(sizes) != 1:
            raise ConfigurationError(f"sub-policies disagree on action-set size: {sorted(sizes)}")

    @property
    def k(self) -> int:
        return len(self.sub_policies)

    @property
    def n_actions(self) -> int:
        return self.sub_policies[0].n_actions

    def distribution(self, obs: Observation) -> np.ndarray:
        """Uniform mixture (the untuned ensemble)."""
        return ensemble_tune(self, np.full(self.k, 1.0 / self.k), obs)

    def trend(self, obs: Observation) -> TrendLabel | None:
        return None


def ensemble_tune(policies: EnsemblePolicy, weights, obs: Observation) -> np.ndarray:
    """Convex combination of the sub-policies' action distributions."""
    dists = [softmax(p.logits(obs)) for p in policies.sub_policies]
    return mix_distributions(dists, weights)


FeaturesSource = Callable[[Observation], MarketFeatures]


def _obs_market(obs: Observation) -> MarketFeatures:
    if obs.market is None:
        raise ConfigurationError("observation carries no market features (indicator warm-up not met?)")
    return obs.market


class TunedPolicy:
    """A frozen base policy reshaped step by step by an executed sketch."""

    def __init__(self, base, template: SketchTemplate, params: SketchParams,
                 features_source: FeaturesSource | None = None):
        is_ensemble = isinstance(base, EnsemblePolicy)
        if is_ensemble != template.mode.is_ensemble:
            raise ConfigurationError(
                f"sketch mode {template.mode} does not match base policy "
                f"({'ensemble' if is_ensemble else 'single'})"
            )
        if is_ensemble and base.k != template.mode.k:
            raise ConfigurationError(f"sketch expects {template.mode.k} sub-policies, base has {base.k}")
        params.validate(template)
        self.base = base
        self.template = template
        self.params = params
        self.features_source = features_source or _obs_market
        self.n_actions = base.n_actions
        self.policy_id = f"tuned({base.policy_id})"

    def directive(self, obs: Observation) -> TuningDirective:
        # trend() and distribution() are usually asked about the same observation
        cached = getattr(self, "_last", None)
        if cached is not None and cached[0] is obs:
            return cached[1]
        d = interpret(self.template, self.params, self.features_source(obs), validate=False)
        self._last = (obs, d)
        return d

    def trend(self, obs: Observation) -> TrendLabel:
        return self.directive(obs).trend

    def distribution(self, obs: Observation) -> np.ndarray:
        d = self.directive(obs)
        if self.template.mode.is_ensemble:
            return ensemble_tune(self.base, d.weights, obs)
        return temperature_tune(self.base.logits(obs), d.temperature)


def tuned_policy(base, template: SketchTemplate, params: SketchParams,
                 features_source: FeaturesSource | None = None) -> TunedPolicy:
    return TunedPolicy(base, template, params, features_source)


def _key_to_json(key) -> list:
    return list(key) if isinstance(key, tuple) else [key]


def _key_from_json(raw) -> Hashable:
    return tuple(raw) if len(raw) != 1 else raw[0]


def export_external_policy(policy: TablePolicy, path: str | Path) -> None:
    doc = {
        "format": LOGITS_FORMAT,
        "version": 1,
        "policy_id": policy.policy_id,
        "n_actions": policy.n_actions,
        "records": [{"key": _key_to_json(k), "logits": v.tolist()} for k, v in policy.table.items()],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_external_policy(path: str | Path) -> TablePolicy:
    """Read a logits file: ``records`` of ``{"key": [...], "logits": [...]}``.

    Keys are ``[asset, timestamp]`` for stock trading and
    ``[order_id, step]`` for order execution.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if doc.get("format") != LOGITS_FORMAT:
        raise FormatError(f"{path}: not an external-logits file")
    table = {}
    for i, rec in enumerate(doc["records"]):
        logits = rec["logits"]
        if "n_actions" in doc and len(logits) != doc["n_actions"]:
            raise FormatError(f"{path}: record {i} has {len(logits)} logits, expected {doc['n_actions']}")
        table[_key_from_json(rec["key"])] = logits
    return TablePolicy(table, doc.get("policy_id", Path(path).stem))


@dataclass
class TrainingLog:
    episode_returns: list[float] = field(default_factory=list)


def train_toy_policy(env, episodes: int, seed: int, lr: float = 0.01, init_scale: float = 0.01,
                     policy_id: str = "toy", log: TrainingLog | None = None) -> LinearPolicy:
    """REINFORCE with a running mean-return baseline over a linear softmax policy.

    ``env`` must provide ``n_actions``, ``n_features``, ``gamma``,
    ``reset(rng) -> Observation`` and ``step(actions) -> (Observation, reward, done)``;
    one action is sampled per observation row.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    m, f = env.n_actions, env.n_features
    W = rng.normal(0.0, init_scale, size=(m, f))
    b = np.zeros(m)
    gamma = getattr(env, "gamma", 1.0)
    baseline, seen = 0.0, 0

    for _ in range(episodes):
        obs = env.reset(rng)
        xs, acts, rewards = [], [], []
        done = False
        while not done:
            x = np.atleast_2d(obs.features)
            p = softmax(x @ W.T + b)
            u = rng.random(len(p))
            a = (p.cumsum(axis=1) < u[:, None]).sum(axis=1).clip(max=m - 1)
            obs, r, done = env.step(a)
            xs.append(x)
            acts.append(a)
            rewards.append(float(r))

        returns = np.zeros(len(rewards))
        g = 0.0
        for t in range(len(rewards) - 1, -1, -1):
            g = rewards[t] + gamma * g
            returns[t] = g

        gW, gb = np.zeros_like(W), np.zeros_like(b)
        for x, a, G in zip(xs, acts, returns):
            p = softmax(x @ W.T + b)
            onehot = np.zeros_like(p)
            onehot[np.arange(len(a)), a] = 1.0
            adv = (onehot - p) * (G - baseline)
            gW += adv.T @ x
            gb += adv.sum(axis=0)
        W += lr * gW
        b += lr * gb

        for G in returns:
            seen += 1
            baseline += (G - baseline) / seen
        if log is not None:
            log.episode_returns.append(float(sum(rewards)))

    return LinearPolicy(W, b, policy_id)
