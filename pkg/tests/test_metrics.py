import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiurnet.metrics import mae, pcc, pcc_with_flag, report, rmse


def brute(pred, truth):
    n = len(pred)
    se = sum((p - t) ** 2 for p, t in zip(pred, truth))
    ae = sum(abs(p - t) for p, t in zip(pred, truth))
    sx, sy = math.fsum(pred), math.fsum(truth)
    sxy = math.fsum(p * t for p, t in zip(pred, truth))
    sxx, syy = math.fsum(p * p for p in pred), math.fsum(t * t for t in truth)
    r = (n * sxy - sx * sy) / math.sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))
    return math.sqrt(se / n), ae / n, r


def test_hand_computed_pcc():
    assert abs(pcc([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) <= 1e-12


def test_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 50))
        p, t = rng.normal(size=n), rng.normal(size=n) * 3 + 1
        r_, m_, c_ = brute(p.tolist(), t.tolist())
        assert abs(rmse(p, t) - r_) <= 1e-9
        assert abs(mae(p, t) - m_) <= 1e-9
        assert abs(pcc(p, t) - c_) <= 1e-9


@settings(max_examples=100, deadline=None)
# offsets far larger than the scaled spread lose bits in a*p + b itself,
# before pcc ever sees the data, so the domain keeps |b| comparable to a
@given(st.integers(3, 40), st.floats(0.1, 10), st.floats(-10, 10), st.integers(0, 2**31 - 1))
def test_pcc_affine_invariance(n, a, b, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=n), rng.normal(size=n)
    assert abs(pcc(a * p + b, t) - pcc(p, t)) <= 1e-12


def test_pcc_sign_flip_and_bounds():
    p = np.array([1.0, 2.0, 3.0])
    assert pcc(p, -p) == pytest.approx(-1.0, abs=1e-15)
    assert pcc(p, 2 * p) == pytest.approx(1.0, abs=1e-15)
    assert -1.0 <= pcc(p, -p) <= 1.0


def test_constant_side_flagged():
    assert pcc_with_flag([1, 1, 1], [1, 2, 3]) == (0.0, True)
    r = report([2.0, 2.0], [1.0, 3.0])
    assert r.degenerate_pcc and r.pcc == 0.0 and r.n == 2


def test_perfect_prediction():
    r = report([1.0, 5.0, 2.0], [1.0, 5.0, 2.0])
    assert (r.rmse, r.mae, r.pcc, r.degenerate_pcc) == (0.0, 0.0, 1.0, False)


def test_length_and_size_errors():
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        pcc([1.0], [2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_rmse_bounds_mae(n, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=n), rng.normal(size=n)
    assert mae(p, t) <= rmse(p, t) + 1e-15
