import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sketchtune.metrics import (
    EquityCurve,
    NoDataError,
    OEOrderResult,
    additional_annualized_return,
    gain_loss_ratio,
    max_drawdown,
    positive_rate,
    price_advantage,
    st_metrics,
)

pa_lists = st.lists(st.floats(-100, 100), min_size=1, max_size=50)
curves = st.lists(st.floats(0.01, 1e6), min_size=2, max_size=60)


def test_price_advantage_examples():
    assert price_advantage([OEOrderResult("a", 10.0, 10.0)] * 3) == 0.0
    assert price_advantage([OEOrderResult("a", 1.0043 * 20.0, 20.0)]) == pytest.approx(43.0, abs=1e-9)
    with pytest.raises(NoDataError):
        price_advantage([])


def test_buy_orders_score_cheap_fills():
    assert OEOrderResult("b", 99.0, 100.0, "buy").pa == pytest.approx(100.0)


@pytest.mark.parametrize("pa, arr", [(3.40, 0.0894), (4.33, 0.1153), (0.0, 0.0)])
def test_arr_examples(pa, arr):
    assert additional_annualized_return(pa) == pytest.approx(arr, abs=5e-4)


def test_glr_examples():
    assert gain_loss_ratio([2, 4, -3]) == 1.0
    assert gain_loss_ratio([1, -1]) == 1.0
    assert gain_loss_ratio([5, 5]) == math.inf
    assert gain_loss_ratio([-1, 0]) == 0.0


def test_pos_examples():
    assert positive_rate([1, 2]) == 1.0
    assert positive_rate([2, -1, -1, 0]) == 0.25
    assert positive_rate([0, 0, 0]) == 0.0


def test_st_metric_examples():
    assert st_metrics(EquityCurve(np.arange(4), [1.0, 2.0, 3.0, 4.0])).MD == 0.0
    assert max_drawdown([100, 50, 80]) == -0.5
    flat = st_metrics(EquityCurve(np.arange(5), [7.0] * 5))
    assert (flat.CR, flat.AR, flat.AV) == (0.0, 0.0, 0.0)
    assert math.isnan(flat.SR)


def test_st_metrics_formulae():
    v = np.array([100.0, 110.0, 99.0, 120.0])
    m = st_metrics(EquityCurve(np.arange(4), v, 252))
    r = v[1:] / v[:-1] - 1
    assert m.CR == pytest.approx(0.2)
    assert m.AR == pytest.approx(1.2 ** (252 / 3) - 1)
    assert m.AV == pytest.approx(r.std(ddof=1) * math.sqrt(252))
    assert m.SR == pytest.approx(r.mean() / r.std(ddof=1) * math.sqrt(252))
    assert m.MD == pytest.approx(99 / 110 - 1)


def brute_md(v):
    worst = 0.0
    for i in range(len(v)):
        for j in range(i, len(v)):
            worst = min(worst, v[j] / v[i] - 1)
    return worst


@given(curves)
def test_md_matches_brute_force(v):
    assert abs(max_drawdown(v) - brute_md(v)) <= 1e-12


@given(pa_lists, st.floats(0.1, 100))
def test_pa_scale_invariant(rels, s):
    base = [OEOrderResult("o", 10 * (1 + r * 1e-4), 10.0) for r in rels]
    scaled = [OEOrderResult("o", s * r.achieved_price, s * r.baseline_price) for r in base]
    assert price_advantage(scaled) == pytest.approx(price_advantage(base), rel=1e-9, abs=1e-9)


@given(pa_lists)
def test_positive_rate_complement(pas):
    n = len(pas)
    assert positive_rate(pas) + sum(p <= 0 for p in pas) / n == 1.0


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_arr_increasing(a, b):
    if b - a > 1e-9:
        assert additional_annualized_return(a) < additional_annualized_return(b)


@given(curves, st.floats(0.01, 100))
def test_sharpe_scale_invariant(v, s):
    a = st_metrics(EquityCurve(np.arange(len(v)), v)).SR
    b = st_metrics(EquityCurve(np.arange(len(v)), np.asarray(v) * s)).SR
    if math.isnan(a):
        return
    assert b == pytest.approx(a, rel=1e-6, abs=1e-9)


def test_equity_curve_validation():
    with pytest.raises(ValueError):
        EquityCurve([0, 1], [1.0, 0.0])
    with pytest.raises(ValueError):
        EquityCurve([1, 0], [1.0, 2.0])
    with pytest.raises(NoDataError):
        st_metrics(EquityCurve([0], [1.0]))
