import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchtune.env import TwoArmedBanditEnv
from sketchtune.indicators import MarketFeatures
from sketchtune.policy import (
    ConstantPolicy,
    DomainError,
    EnsemblePolicy,
    FormatError,
    LinearPolicy,
    MissingStateError,
    NormalizationError,
    Observation,
    TablePolicy,
    TrainingLog,
    ensemble_tune,
    entropy,
    export_external_policy,
    load_external_policy,
    mix_distributions,
    softmax,
    temperature_tune,
    train_toy_policy,
    tuned_policy,
)
from sketchtune.sketch import SINGLE, ConfigurationError, Mode, SketchParams, TrendLabel, default_template

logit_vectors = arrays(float, st.integers(2, 8), elements=st.floats(-20, 20))
OBS = Observation(("x",), np.array([[1.0, -0.5, 0.25]]), MarketFeatures(0.5, 0.2, 2.0))


def test_temperature_examples():
    assert temperature_tune([0.0, 0.0], 3.7).tolist() == [0.5, 0.5]
    z = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(temperature_tune(z, 1.0), softmax(z))
    np.testing.assert_allclose(temperature_tune([2.0, 0.0], 1000.0), [0.5, 0.5], atol=1e-3)


def test_temperature_domain_errors():
    with pytest.raises(DomainError):
        temperature_tune([1.0, 0.0], 0.0)
    with pytest.raises(DomainError):
        temperature_tune([1.0, 0.0], -1.0)
    with pytest.raises(DomainError):
        temperature_tune([np.inf, 0.0], 1.0)


def test_softmax_is_overflow_safe():
    p = temperature_tune([1000.0, 999.0], 0.1)
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1.0)


@given(logit_vectors, st.floats(0.1, 10))
def test_argmax_invariance(z, phi):
    # ties excluded; gaps below double resolution of the probabilities count as ties
    top2 = np.sort(z)[-2:]
    if top2[1] - top2[0] <= 1e-12 * phi:
        return
    assert np.argmax(temperature_tune(z, phi)) == np.argmax(z)


@given(logit_vectors, st.floats(0.1, 10), st.floats(0.1, 10))
def test_entropy_monotone_in_temperature(z, a, b):
    lo, hi = sorted((a, b))
    assert entropy(temperature_tune(z, lo)) <= entropy(temperature_tune(z, hi)) + 1e-12


def two_policy_ensemble():
    return EnsemblePolicy([ConstantPolicy([50.0, 0.0], "a"), ConstantPolicy([0.0, 50.0], "b")])


def test_ensemble_examples():
    ens = two_policy_ensemble()
    obs = Observation(("x",))
    np.testing.assert_allclose(ensemble_tune(ens, [0.5, 0.5], obs), [[0.5, 0.5]], atol=1e-15)
    assert np.array_equal(ensemble_tune(ens, [1.0, 0.0], obs), ens.sub_policies[0].distribution(obs))
    with pytest.raises(NormalizationError):
        ensemble_tune(ens, [0.5, 0.6], obs)


def test_ensemble_requires_two_members_of_equal_size():
    with pytest.raises(Exception):
        EnsemblePolicy([ConstantPolicy([0.0, 1.0])])
    with pytest.raises(Exception):
        EnsemblePolicy([ConstantPolicy([0.0, 1.0]), ConstantPolicy([0.0, 1.0, 2.0])])


@given(st.integers(2, 5), st.integers(2, 6), st.data())
def test_mixture_in_convex_hull(k, m, data):
    dists = [softmax(data.draw(arrays(float, m, elements=st.floats(-10, 10)))) for _ in range(k)]
    raw = np.array(data.draw(st.lists(st.floats(0, 1), min_size=k, max_size=k)))
    if raw.sum() == 0:
        raw[0] = 1.0
    mix = mix_distributions(dists, raw / raw.sum())
    stack = np.stack(dists)
    assert abs(mix.sum() - 1) <= 1e-9
    assert np.all(mix >= stack.min(axis=0) - 1e-12) and np.all(mix <= stack.max(axis=0) + 1e-12)


def test_external_policy_lookup_and_round_trip(tmp_path):
    table = {("AAA", 100): [0.1, 0.2, 0.3], ("AAA", 200): [1.0 / 3, -2.5e-300, 7.0]}
    pol = TablePolicy(table)
    export_external_policy(pol, tmp_path / "p.json")
    back = load_external_policy(tmp_path / "p.json")
    for key, v in table.items():
        assert back.logits(Observation((key,)))[0].tolist() == v
    with pytest.raises(MissingStateError):
        back.logits(Observation((("AAA", 300),)))


def test_external_policy_ragged(tmp_path):
    doc = {"format": "sketchtune.external-logits", "records": [
        {"key": ["o1", 0], "logits": [0, 1, 2]}, {"key": ["o1", 1], "logits": [0, 1, 2, 3]}]}
    (tmp_path / "r.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_external_policy(tmp_path / "r.json")


def test_toy_zero_learning_rate_keeps_initialisation():
    env = TwoArmedBanditEnv()
    pol = train_toy_policy(env, 5, seed=7, lr=0.0)
    init = np.random.default_rng(7).normal(0.0, 0.01, size=(2, 2))
    assert np.array_equal(pol.weights, init)
    assert np.array_equal(pol.bias, np.zeros(2))


def test_toy_training_is_deterministic():
    a = train_toy_policy(TwoArmedBanditEnv(), 30, seed=3)
    b = train_toy_policy(TwoArmedBanditEnv(), 30, seed=3)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_toy_policy_learns_the_paying_arm():
    log = TrainingLog()
    pol = train_toy_policy(TwoArmedBanditEnv(), 500, seed=0, log=log)
    for s in (0, 1):
        p = pol.distribution(Observation((s,), np.eye(2)[[s]]))
        assert p[0, 1] > 0.9
    # brute-force arm comparison: arm 1 pays 1 per pull, arm 0 pays 0
    assert np.mean(log.episode_returns[-50:]) > np.mean(log.episode_returns[:50])


def test_policy_weights_are_read_only():
    pol = LinearPolicy(np.ones((2, 3)))
    with pytest.raises(ValueError):
        pol.weights[0, 0] = 5.0


def base_linear():
    return LinearPolicy(np.array([[0.5, 1.0, -1.0], [0.0, -0.3, 2.0], [1.0, 0.0, 0.0]]), policy_id="base")


def test_tuned_identity_equals_base():
    base = base_linear()
    tpl = default_template()
    tuned = tuned_policy(base, tpl, SketchParams.identity(tpl, [1.0] * 8))
    assert np.array_equal(tuned.distribution(OBS), base.distribution(OBS))


def test_tuned_one_hot_equals_member():
    ens = EnsemblePolicy([base_linear(), ConstantPolicy([0.0, 1.0, 2.0])])
    tpl = default_template(Mode.ensemble(2))
    params = SketchParams([1.0] * 8, {t: (0.0, 1.0) for t in tpl.trends})
    assert np.array_equal(tuned_policy(ens, tpl, params).distribution(OBS), ens.sub_policies[1].distribution(OBS))


def test_tuned_rapid_descend_uses_its_temperature():
    base = base_linear()
    tpl = default_template()
    temps = {t: 1.0 for t in tpl.trends}
    temps[TrendLabel.RAPID_DESCEND] = 3.5
    tuned = tuned_policy(base, tpl, SketchParams([1.0] * 8, temps))
    obs = Observation(("x",), OBS.features, MarketFeatures(2.0, 2.0, 2.0))
    assert tuned.trend(obs) is TrendLabel.RAPID_DESCEND
    assert np.array_equal(tuned.distribution(obs), temperature_tune(base.logits(obs), 3.5))


def test_tuned_mode_mismatch():
    tpl = default_template(Mode.ensemble(2))
    with pytest.raises(ConfigurationError):
        tuned_policy(base_linear(), tpl, SketchParams.identity(tpl, [1.0] * 8))
    single = default_template(SINGLE)
    with pytest.raises(ConfigurationError):
        tuned_policy(two_policy_ensemble(), single, SketchParams.identity(single, [1.0] * 8))


def test_tuning_never_mutates_base():
    base = base_linear()
    before = base.weights.copy(), base.bias.copy()
    tpl = default_template()
    tuned = tuned_policy(base, tpl, SketchParams([0.0] * 8, {t: 0.2 for t in tpl.trends}))
    for _ in range(10):
        tuned.distribution(OBS)
    assert np.array_equal(base.weights, before[0]) and np.array_equal(base.bias, before[1])
