"""Tests for the non-backtracking path oracles and exact identities.

The identity residuals are algebraic facts for any unimodular sample, so
the assertions run at 1e-10..1e-12 rather than statistical tolerances.
"""

import numpy as np
import pytest

from rbmlab import nbw_oracle as nb
from rbmlab import rbm_model
from rbmlab.poly_engine import PolyFamilySpec
from rbmlab.torus_walk import TorusLattice

LAT6 = TorusLattice(1, 6, 2.0)


def _sample(beta, seed):
    return rbm_model.sample_rbm(LAT6, beta, seed=seed, truncation=0.0).H


@pytest.mark.parametrize("beta", [1, 2])
def test_low_powers(beta):
    H = _sample(beta, 3)
    np.testing.assert_allclose(nb.nb_power(H, 0), np.eye(6), atol=0)
    np.testing.assert_allclose(nb.nb_power(H, 1), H, atol=0)
    assert np.max(np.abs(nb.nb_power(H, 2) - (H @ H - np.eye(6)))) < 1e-12
    assert np.max(np.abs(nb.nb_power(H, -2))) == 0.0
    assert np.max(np.abs(nb.calv_power(H, 2) - (H @ H - np.eye(6)))) < 1e-12
    np.testing.assert_allclose(nb.calv_power(H, 1), H, atol=0)


@pytest.mark.parametrize("beta", [1, 2])
@pytest.mark.parametrize("seed", [1, 2, 5])
def test_edge_operator_equals_bruteforce(beta, seed):
    H = _sample(beta, seed)
    for n in range(2, 7):
        eo = nb.nb_power(H, n, mode="edge_operator")
        bf = nb.nb_power(H, n, mode="bruteforce")
        assert np.max(np.abs(eo - bf)) < 1e-10, n


def test_hermitian_symmetry():
    H = _sample(2, 8)
    for n in (3, 4, 5):
        V = nb.nb_power(H, n)
        assert np.max(np.abs(V - V.conj().T)) < 1e-12


@pytest.mark.parametrize("beta", [1, 2])
def test_calv_drop_phi3_recovers_v(beta):
    H = _sample(beta, 4)
    for n in (4, 5, 6):
        d = np.max(np.abs(nb.calv_power(H, n, drop_phi3=True) - nb.nb_power(H, n)))
        assert d < 1e-12, n


@pytest.mark.parametrize("beta", [1, 2])
def test_recursion_identity(beta):
    H = _sample(beta, 7)
    for n in (5, 6, 7):
        assert nb.lemma_recursion_residual(H, n) < 1e-10, n


@pytest.mark.parametrize("beta", [1, 2])
def test_p_expansion(beta):
    H = _sample(beta, 9)
    for n in (1, 2, 3):
        assert nb.p_expansion_residual(H, n) < 1e-14, n
    assert nb.p_expansion_residual(H, 7) < 1e-9


@pytest.mark.parametrize("beta", [1, 2])
def test_loopfree_vacuous_below_reach(beta):
    # double loops need 2l >= 6 steps, so R = 3 changes nothing for n <= 5
    H = _sample(beta, 10)
    for n in (3, 4, 5):
        d = np.max(np.abs(nb.loopfree_power(H, n, R=3) - nb.nb_power(H, n)))
        assert d < 1e-12, n


@pytest.mark.parametrize("beta", [1, 2])
def test_loopfree_relation_and_renorm_expansion(beta):
    H = _sample(beta, 23)
    assert nb.vn_relation_residual(H, 8, R=3) < 1e-9
    assert nb.renorm_expansion_residual(H, 8, R=3) < 1e-9


def test_loop_coefficient_matches_ensemble_constant():
    a6 = rbm_model.a2l(LAT6, 3).value
    H1 = _sample(1, 41)
    d6 = nb.loop_coefficient(H1, 3, R=3)
    # signs square away: the diagonal is the deterministic loop weight
    assert np.max(np.abs(d6 - a6)) < 1e-12
    H2 = _sample(2, 41)
    c6 = nb.loop_coefficient(H2, 3, R=3)
    assert np.ptp(np.abs(c6)) > 1e-3  # phases make it genuinely diagonal
    assert np.max(np.abs(c6)) <= a6 + 1e-12


def test_budget_abort():
    with pytest.raises(nb.PathBudgetError):
        nb.nb_power(np.eye(12), 12, mode="bruteforce")
    with pytest.raises(nb.PathBudgetError):
        nb.calv_power(_sample(1, 1), 7, budget=100)
    assert nb.predicted_walks(6, 3) == 6 * 6 * 5 * 5


def test_mode_and_block_validation():
    H = _sample(1, 2)
    with pytest.raises(ValueError):
        nb.nb_power(H, 3, mode="nope")
    with pytest.raises(ValueError):
        nb.ub_block(H, 4, 2)
    assert np.max(np.abs(nb.ub_block(H, 5, -1))) == 0.0


def test_moment_mc_determinism_and_threads():
    lat = TorusLattice(1, 16, 4.0)
    est = nb.moment_mc(lat, 1, "V", [4, 6], samples=400, seed=13)
    assert est.product.value == pytest.approx(4.870997529923152, rel=1e-12)
    assert est.product.se == pytest.approx(0.5615278567394947, rel=1e-12)
    assert est.marginals[0].value == pytest.approx(0.04842199473983047, rel=1e-12)
    est_t = nb.moment_mc(lat, 1, "V", [4, 6], samples=400, seed=13, threads=4)
    assert est_t.product == est.product and est_t.marginals == est.marginals
    row = est.as_row()
    assert row["object"] == "V" and row["degrees"] == "4x6" and row["samples"] == 400


def test_moment_mc_odd_degree_vanishes():
    lat = TorusLattice(1, 16, 4.0)
    for beta in (1, 2):
        est = nb.moment_mc(lat, beta, "V", [5], samples=1500, seed=3)
        assert abs(est.product.value) < 4 * est.product.se


def test_moment_mc_poly_modes_agree():
    lat = TorusLattice(1, 16, 4.0)
    spec = PolyFamilySpec("modified_p", a4=rbm_model.a4(lat))
    exact = nb.moment_mc(lat, 1, spec, [6], samples=600, seed=21, mc_mode="exact")
    hutch = nb.moment_mc(lat, 1, spec, [6], samples=600, seed=21, mc_mode="hutchinson")
    comb = np.hypot(exact.product.se, hutch.product.se)
    assert abs(exact.product.value - hutch.product.value) < 4 * comb
    with pytest.raises(ValueError):
        nb.moment_mc(lat, 1, "W", [4], samples=10, seed=0)
    with pytest.raises(ValueError):
        nb.moment_mc(lat, 1, "V", [4, 6], k=3, samples=10, seed=0)
    with pytest.raises(ValueError):
        nb.moment_mc(lat, 1, "V", [4], samples=10, seed=0, mc_mode="nope")


def test_moment_reduction_small_scale():
    # polynomial vs non-backtracking trace on the standard grid, low stats
    lat = TorusLattice(1, 32, 8.0)
    spec = PolyFamilySpec("modified_p", a4=rbm_model.a4(lat))
    ev = nb.moment_mc(lat, 1, "V", [8], samples=2000, seed=7)
    ep = nb.moment_mc(lat, 1, spec, [8], samples=2000, seed=7)
    ratio = ep.product.value / ev.product.value
    se = abs(ratio) * (
        ev.product.se / abs(ev.product.value) + ep.product.se / abs(ep.product.value)
    )
    assert abs(ratio - 1) <= 5 * 8 / 8.0 + 3 * se


def test_trace_profile_matches_powers():
    H = _sample(2, 6)
    prof = nb.nb_trace_profile(H, 5)
    for n in range(6):
        assert prof[n] == pytest.approx(float(np.real(np.trace(nb.nb_power(H, n)))), abs=1e-10)


def test_monotonicity_diagnostic():
    lat = TorusLattice(1, 32, 8.0)
    lo = nb.moment_mc(lat, 1, "V", [6], samples=3000, seed=17)
    hi = nb.moment_mc(lat, 1, "V", [8], samples=3000, seed=17)
    bound = (1 + 10 * 8 / 8.0) * hi.product.value + 3 * np.hypot(lo.product.se, hi.product.se)
    assert lo.product.value <= bound
