"""Torus kernel tests: theta duality, profile normalization, exact kernels."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbmlab.torus_walk import (
    TorusLattice,
    _theta_direct,
    _theta_dual,
    fourier_profile,
    heat_kernel_constant,
    intersection_envelope,
    intersection_expectation,
    kernel_value,
    mass_M,
    profile_sigma2,
    theta,
    transition_n,
    vertex_split_ratio,
)


def brute_theta_1d(x, s, nmax=60):
    # independent oracle: plain python wrapped-Gaussian sum
    tot = 0.0
    for n in range(-nmax, nmax + 1):
        tot += math.exp(-((n + x) ** 2) / (2.0 * s))
    return tot / math.sqrt(2.0 * math.pi * s)


def test_theta_wide_is_one():
    assert abs(theta(0.0, 100.0) - 1.0) <= 1e-12


def test_theta_narrow_midpoint():
    t = 0.01
    val = theta(0.5, t)
    assert abs(val - brute_theta_1d(0.5, t)) <= 1e-16 + 1e-12 * val
    approx = 2.0 * (2.0 * math.pi * t) ** -0.5 * math.exp(-1.0 / (8.0 * t))
    assert abs(val / approx - 1.0) <= 0.01


def test_theta_direct_dual_agree():
    for s in (0.5, 1.0, 2.0):
        for x in (0.0, 0.3):
            for d in (1, 2):
                S = s * np.eye(d)
                xv = np.full((1, d), x)
                a = _theta_direct(xv, S, 1e-16)[0]
                b = _theta_dual(xv, S, 1e-16)[0]
                assert abs(a - b) <= 1e-11 * max(1.0, abs(a))


def test_theta_anisotropic_direct_dual():
    S = np.array([[0.8, 0.2], [0.2, 0.5]])
    xv = np.array([[0.15, -0.4]])
    a = _theta_direct(xv, S, 1e-16)[0]
    b = _theta_dual(xv, S, 1e-16)[0]
    assert abs(a - b) <= 1e-11 * abs(a)


def test_theta_batch_shape():
    xs = np.linspace(-1, 1, 7).reshape(-1, 1)
    vals = theta(xs, 0.3)
    assert vals.shape == (7,)
    assert np.all(vals > 0)


def test_profile_normalization():
    for lat in (
        TorusLattice(1, 32, 4.0),
        TorusLattice(2, 8, 2.0),
        TorusLattice(3, 8, 1.5),
    ):
        s2 = profile_sigma2(lat)
        assert abs(s2.sum() - 1.0) <= 1e-12
        assert s2.min() >= 0.0


def test_profile_matches_image_sum_oracle():
    lat = TorusLattice(1, 32, 4.0)
    s2 = profile_sigma2(lat)
    W, L = lat.W, lat.L
    M = sum(math.exp(-((k / W) ** 2) / 2.0) for k in range(-400, 401))
    for j in range(L):
        delta = (j + L // 2) % L - L // 2
        val = sum(math.exp(-(((delta + n * L) / W) ** 2) / 2.0) for n in range(-8, 9)) / M
        assert abs(s2[j] - val) <= 1e-13


def test_mass_matches_width():
    lat = TorusLattice(1, 64, 10.0)
    assert abs(mass_M(lat) / lat.W - 1.0) <= 1e-12


def test_chapman_kolmogorov_exact():
    lat = TorusLattice(1, 32, 4.0)
    p3 = transition_n(lat, 3)
    p4 = transition_n(lat, 4)
    p7 = transition_n(lat, 7)
    L = lat.L
    conv = np.zeros(L)
    for a in range(L):  # direct O(L^2) circular convolution as the oracle
        conv[a] = sum(p3[b] * p4[(a - b) % L] for b in range(L))
    assert np.max(np.abs(conv - p7)) <= 1e-12


def test_local_limit_agreement():
    lat = TorusLattice(1, 64, 8.0)
    for n in (1, 5, 20, 50):
        pc = transition_n(lat, n, "convolution")
        pt = transition_n(lat, n, "theta")
        rel = np.max(np.abs(pt - pc) / pc)
        assert rel <= 1e-6


def test_heat_kernel_constant():
    lat = TorusLattice(1, 64, 8.0)
    c1 = heat_kernel_constant(lat, range(1, 51), c2=0.4)
    assert 0.2 <= c1 <= 3.0


def test_vertex_split_pinned():
    lat = TorusLattice(1, 32, 4.0)
    z = np.zeros(1, int)
    r = vertex_split_ratio(lat, 4, 4, 1, z, z, z)
    assert 0 < r <= 10.0


def test_vertex_split_scan():
    lat = TorusLattice(1, 32, 4.0)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n3 = int(rng.integers(1, 5))
        n1 = int(rng.integers(n3, 9))
        n2 = int(rng.integers(n3, 9))
        xs = rng.integers(-16, 16, size=(3, 1))
        r = vertex_split_ratio(lat, n1, n2, n3, *xs)
        assert math.isfinite(r) and r > 0
        worst = max(worst, r)
    assert worst <= 50.0


def test_intersection_envelope_1d():
    lat = TorusLattice(1, 256, 16.0)
    val = intersection_expectation(lat, 20, 20, kind="crossing")
    env = intersection_envelope(lat, 20)
    assert 0 < val <= 10.0 * env


def test_intersection_envelope_3d():
    lat = TorusLattice(3, 32, 4.0)
    val = intersection_expectation(lat, 20, 20, kind="crossing")
    env = intersection_envelope(lat, 20)
    assert 0 < val <= 10.0 * env


def test_self_intersection_matches_direct():
    lat = TorusLattice(1, 32, 4.0)
    n = 6
    val = intersection_expectation(lat, n, n, kind="self")
    kernels = [transition_n(lat, k) for k in range(n + 1)]
    # oracle: triple sum over time pairs 0 <= i < j <= n-1 and the meeting site
    tot = 0.0
    for i in range(0, n):
        for j in range(i + 1, n):
            for x in range(lat.L):
                tot += kernels[i][x] * kernels[j - i][0] * kernels[n - j][(-x) % lat.L]
    tot /= kernels[n][0]
    assert abs(val - tot) <= 1e-12 * tot


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.floats(0.05, 4.0))
def test_theta_symmetry_and_periodicity(k, s):
    x = k / 41.0
    a = theta(x, s)
    assert abs(a - theta(-x, s)) <= 1e-12 * abs(a)
    assert abs(a - theta(x + 1.0, s)) <= 1e-12 * abs(a)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 20))
def test_transition_normalization(n):
    lat = TorusLattice(1, 32, 3.0)
    p = transition_n(lat, n)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert kernel_value(p, 5) == pytest.approx(kernel_value(p, -5), abs=1e-15)


def test_fourier_profile_real_and_bounded():
    lat = TorusLattice(2, 16, 3.0)
    ph = fourier_profile(lat)
    assert ph.shape == (16, 16)
    assert abs(ph.reshape(-1)[0] - 1.0) <= 1e-12
    assert np.all(ph <= 1.0 + 1e-12)
