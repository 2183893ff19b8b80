"""Tests for the Chebyshev recursion engine and its regime asymptotics.

Oracles: hand-expanded low orders, the generating-function identity
(partial sum times denominator equals 1), scipy's Chebyshev U, an explicit
diagonal-coefficient matrix recursion, and the polynomial itself for the
two asymptotic regimes.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import eval_chebyu

from rbmlab import poly_engine as pe


def test_hand_derived_low_orders():
    z, A4, A6 = 1.37, 0.02, 0.005
    assert pe.eval_scalar(0, z) == 1.0
    assert float(pe.eval_scalar(1, z)) == z
    assert float(pe.eval_scalar(4, z, a4=A4)) == pytest.approx(
        z**4 - 3 * z**2 + 1 + A4, abs=1e-13
    )
    assert float(pe.eval_scalar(5, z, a4=A4)) == pytest.approx(
        z**5 - 4 * z**3 + 3 * z + 2 * A4 * z, abs=1e-13
    )
    want6 = z**6 - 5 * z**4 + 6 * z**2 + 3 * A4 * z**2 - 2 * A4 - 1 - A6
    assert float(pe.eval_scalar(6, z, a4=A4, a2l={3: A6})) == pytest.approx(want6, abs=1e-13)
    # 1x1 matrix path agrees with the scalar path
    got = pe.poly_matrix(np.array([[z]]), 6, a4=A4, a2l={3: A6})[0, 0]
    assert got == pytest.approx(want6, abs=1e-12)


def test_chebyshev_limit():
    zs = np.linspace(-1.9, 1.9, 11)
    for n in (1, 7, 30, 60):
        assert np.max(np.abs(pe.eval_scalar(n, zs) - eval_chebyu(n, zs / 2))) < 1e-9


def test_generating_function_identity():
    # sum_k P_k(z) t^k times the denominator telescopes to 1
    z, A4 = 0.83, 3e-3
    a2l = {3: 1e-3, 4: 5e-4}
    t = 0.3
    orders = pe.eval_scalar(80, z, a4=A4, a2l=a2l, all_orders=True)
    series = float(sum(orders[k] * t**k for k in range(81)))
    den = 1 - z * t + t**2 - A4 * t**4 + sum(c * t ** (2 * l) for l, c in a2l.items())
    assert series * den == pytest.approx(1.0, abs=1e-10)


def test_parity_and_leading_coefficient():
    zs = np.array([0.3, 1.1, 2.7])
    for n in (4, 7, 10):
        left = pe.eval_scalar(n, -zs, a4=0.01, a2l={3: 0.002})
        right = (-1) ** n * pe.eval_scalar(n, zs, a4=0.01, a2l={3: 0.002})
        assert np.allclose(left, right, atol=1e-9)
    assert float(pe.eval_scalar(5, 1e6, a4=0.3)) == pytest.approx(1e30, rel=1e-8)


def test_contour_matches_recursion():
    a2l = {3: 2e-4, 4: 1e-4}
    for n in (5, 20, 100, 500):
        for x in (0.0, 0.5, 0.9, 0.999, 1.0):
            rec = float(pe.eval_scalar(n, 2 * x, a4=1e-4, a2l=a2l))
            con = pe.contour_eval(n, 2 * x, a4=1e-4, a2l=a2l)
            assert abs(con - rec) / max(1.0, abs(rec)) < 1e-8, (n, x)
    assert pe.contour_eval(0, 0.5) == 1.0


def test_rescaled_chebyshev_envelope():
    # interior of the edge window: the rescaled Chebyshev tracks P_n to o(1)
    a4, n = 1e-4, 1000
    grid = np.linspace(0.0, math.sqrt(1 - a4), 201)
    assert pe.envelope_gap(n, grid[:-1], a4) < 0.01
    # at the endpoint the gap is genuinely O(n a4): pinned, not hidden
    endpoint = pe.envelope_gap(n, grid[-1:], a4)
    assert 0.05 < endpoint < 0.12


def test_bounded_oscillatory_region():
    eps = 0.05
    xs = np.linspace(0.0, 1 - eps, 300)
    vals = np.abs(pe.eval_scalar(100, 2 * xs, a4=1e-4)) * np.sqrt(1 - xs**2)
    assert float(vals.max()) < 1.1


def test_chebyshev_growth_bounds():
    assert pe.chebyshev_u(100, 1.04) >= math.e**2
    grid = 1 + np.linspace(-1.0, 0.0, 200)
    for n in (1, 5, 50):
        assert np.max(np.abs(pe.chebyshev_u(n, grid))) <= 2 * n + 1e-9


def test_sinc_limit_of_chebyshev():
    M, t = 200, 1.0
    n = int(t * M)
    for y, tol in ((-1.0, 5e-3), (-4.0, 5e-3), (1.0, 1e-2)):
        got = pe.chebyshev_u(n, 1 + y / (2 * M**2)) / n
        r = math.sqrt(abs(y))
        ref = math.sin(t * r) / (t * r) if y < 0 else math.sinh(t * r) / (t * r)
        assert abs(got - ref) < tol, y


def test_supercritical_asymptote():
    W = 8.0
    a2 = pe.asymptotic_a2l(3, W, 6)
    a4v = (4 * math.pi) ** -1.5 * W**-3
    s = 1 - a4v + sum(a2.values())
    for n, tol in ((50, 0.02), (100, 0.03)):
        x = math.sqrt(s) + 0.7 / n**2
        rec = float(pe.eval_scalar(n, 2 * x, a4=a4v, a2l=a2))
        asy = float(pe.supercrit_asymptote(n, x, a4v, a2))
        assert abs(rec - asy) / asy < tol


def test_subcritical_transform_matches_polynomial_d3():
    W, t = 48.0, 1.0
    n = int(t * W**2)
    a2 = pe.asymptotic_a2l(3, W, n // 2)
    a4v = (4 * math.pi) ** -1.5 * W**-3
    for x_hat in (1.0, -1.0):
        x = pe.subcrit_spectral_param(x_hat, W, 3)
        rec = float(pe.eval_scalar(n, 2 * x, a4=a4v, a2l=a2)) / n
        lim = pe.subcrit_limit_transform(x_hat, t, 3)
        assert abs(rec - lim) / abs(lim) < 0.03, x_hat


def test_subcritical_transform_matches_polynomial_d2():
    W, t = 256.0, 1.0
    n = int(t * W)
    a2 = pe.asymptotic_a2l(2, W, n // 2)
    a4v = (4 * math.pi) ** -1 * W**-2
    x = pe.subcrit_spectral_param(1.0, W, 2)
    rec = float(pe.eval_scalar(n, 2 * x, a4=a4v, a2l=a2)) / n
    lim = pe.subcrit_limit_transform(1.0, t, 2)
    assert abs(rec - lim) / abs(lim) < 0.01


def test_subcritical_transform_tails_and_errors():
    assert abs(pe.subcrit_limit_transform(5.0, 1.0, 3)) < 2 / math.sqrt(5.0)
    assert abs(pe.subcrit_limit_transform(10.0, 1.0, 3)) < 0.1
    with pytest.raises(ValueError):
        pe.subcrit_limit_transform(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        pe.subcrit_spectral_param(1.0, 8.0, 1)


def test_matrix_vector_and_trace_consistency():
    rng = np.random.Generator(np.random.Philox(key=3))
    N = 24
    X = rng.standard_normal((N, N))
    H = (X + X.T) / math.sqrt(2 * N)
    a2d = {3: 0.01, 4: 0.004}
    P = pe.poly_matrix(H, 9, a4=0.03, a2l=a2d)
    v = rng.standard_normal(N)
    pv = pe.apply_to_vector(H, 9, v, a4=0.03, a2l=a2d)
    assert np.max(np.abs(P @ v - pv)) < 1e-12
    tr = pe.trace_poly(H, 9, a4=0.03, a2l=a2d)
    assert tr == pytest.approx(float(np.trace(P)), abs=1e-10)
    est, se = pe.trace_poly(H, 9, a4=0.03, a2l=a2d, mode="hutchinson", probes=4000, seed=1)
    assert se > 0 and abs(est - tr) < 4 * se
    single, zero_se = pe.trace_poly(H, 3, mode="hutchinson", probes=1, seed=2)
    assert zero_se == 0.0
    with pytest.raises(ValueError):
        pe.apply_to_vector(H, 9, v, a2l={300: 1e-5})
    with pytest.raises(ValueError):
        pe.trace_poly(H, 3, mode="nope")
    with pytest.raises(ValueError):
        pe.eval_scalar(4, 0.5, a2l={2: 0.1})


def test_all_orders_traces():
    rng = np.random.Generator(np.random.Philox(key=5))
    N = 16
    X = rng.standard_normal((N, N))
    H = (X + X.T) / math.sqrt(2 * N)
    exact = pe.trace_poly(H, 6, a4=0.02, all_orders=True)
    assert exact.shape == (7,)
    assert exact[0] == pytest.approx(N, abs=1e-9)
    est, _ = pe.trace_poly(H, 6, a4=0.02, mode="hutchinson", probes=2000, seed=7, all_orders=True)
    assert est.shape == (7,)
    assert est[0] == pytest.approx(N, abs=1e-9)  # z.z = N exactly for signs


def test_diagonal_coefficients_against_explicit_recursion():
    rng = np.random.Generator(np.random.Philox(key=9))
    N, n = 10, 8
    X = rng.standard_normal((N, N))
    H = (X + X.T) / math.sqrt(2 * N)
    c4 = rng.random(N) * 0.05
    c6 = rng.random(N) * 0.02
    got = pe.poly_matrix(H, n, a4=c4, a2l={3: c6})
    # independent oracle: dense diagonal matrices and an explicit loop
    D4, D6 = np.diag(c4), np.diag(c6)
    ps = [np.eye(N), H]
    for k in range(2, n + 1):
        acc = H @ ps[k - 1] - ps[k - 2]
        if k >= 4:
            acc = acc + D4 @ ps[k - 4]
        if k >= 6:
            acc = acc - D6 @ ps[k - 6]
        ps.append(acc)
    assert np.max(np.abs(got - ps[n])) < 1e-12


def test_sinc_transform():
    # a zero of sin lands exactly on the kernel zero
    lam = -math.pi**2
    assert pe.sinc_transform([lam], 1.0, 2) == pytest.approx(0.0, abs=1e-25)
    # mixture averages pointwise values
    pts = [-1.0, -2.0]
    v = pe.sinc_transform(pts, 0.7, 2)
    singles = [pe.sinc_transform([p], 0.7, 2) for p in pts]
    assert v == pytest.approx(0.5 * (singles[0] + singles[1]), rel=1e-12)
    # weights
    vw = pe.sinc_transform(pts, 0.7, 2, weights=[3.0, 1.0])
    assert vw == pytest.approx(0.75 * singles[0] + 0.25 * singles[1], rel=1e-12)
    # positive side grows; guard produces inf, log mode stays finite
    assert pe.sinc_transform([4.0], 2.0, 4) > 1.0
    big = pe.sinc_transform([1.0], 800.0, 5)
    assert math.isinf(big)
    lg = pe.sinc_transform([1.0], 800.0, 5, log=True)
    assert lg == pytest.approx(10 * (800.0 - math.log(2.0) - math.log(800.0)), rel=1e-12)
    with pytest.raises(ValueError):
        pe.sinc_transform([1.0], 1.0, 3)
    with pytest.raises(ValueError):
        pe.sinc_transform([1.0, 2.0], 1.0, 2, log=True)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(min_value=0, max_value=40),
    z=st.floats(min_value=-2.0, max_value=2.0),
    a4=st.floats(min_value=0.0, max_value=0.05),
)
def test_recursion_parity_property(n, z, a4):
    left = float(pe.eval_scalar(n, -z, a4=a4))
    right = (-1) ** n * float(pe.eval_scalar(n, z, a4=a4))
    assert left == pytest.approx(right, abs=1e-8 * max(1, abs(right)))
