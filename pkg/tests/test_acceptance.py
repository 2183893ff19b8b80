"""End-to-end acceptance gate.

One test per shipped guarantee, in order, each printing a single
ACCEPTANCE line (repeated in the terminal summary section).  Exact
identities run at full stated scale; the statistical proxies call the
experiment recipes in process at their published defaults and trust the
recipes' own gating comparisons.  Two guarantees fail honestly and are
strict xfails with the analysis in the test body: the edge law under the
infinite-volume shift convention, and the polynomial envelope at the very
edge of the spectral interval.

Rough runtimes at 4 threads: trace reduction ~6 min, edge law ~4 min,
factorization ~4 min, identity suite ~2 min, everything else seconds.
"""

import json
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy import integrate

from rbmlab import diagram_lab as dl
from rbmlab import exp_cli as cli
from rbmlab import nbw_oracle as nbw
from rbmlab import poly_engine as pe
from rbmlab.exp_cli import _key
from rbmlab.rbm_model import a2l, sample_rbm
from rbmlab.torus_walk import (
    TorusLattice,
    _theta_direct,
    _theta_dual,
    heat_kernel_constant,
    transition_n,
    vertex_split_ratio,
)

THREADS = 4


def _run(name, out_dir, threads=THREADS, **overrides):
    """Execute one recipe in process; return (exit code, manifest, rows)."""
    recipe = cli._REGISTRY[name]
    cfg = cli.resolve_config(recipe, None, {}, strict=False)
    cfg.values.update(overrides)
    cfg.values["run.threads"] = threads
    code = cli.run_recipe(recipe, cfg, out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    rows = {}
    for line in (out_dir / "result.csv").read_text().splitlines()[1:]:
        q, v = line.split(",")[:2]
        rows.setdefault(q, float(v))
    return code, manifest, rows


def _comparisons(manifest):
    return {c["name"]: c for c in manifest["comparisons"]}


# ---------------------------------------------------------------------------
# exact identities


def test_c01_exact_identities(acceptance_report):
    # four operator identities, 20 instances per beta, N = 6, degrees to 8
    lat = TorusLattice(1, 6, 2.0)
    n, R, tol = 8, 3, 1e-9
    worst = 0.0
    for beta in (1, 2):
        for i in range(20):
            H = sample_rbm(lat, beta, _key(0, beta, i)).H
            worst = max(
                worst,
                nbw.lemma_recursion_residual(H, n),
                nbw.p_expansion_residual(H, n),
                nbw.vn_relation_residual(H, n, R),
                nbw.renorm_expansion_residual(H, n, R),
            )
    ok = worst <= tol
    acceptance_report("c01 exact-identities", ok, f"worst residual {worst:.2e} <= {tol:g}")
    assert ok


def test_c02_walk_oracle_equivalence(acceptance_report):
    tol = 1e-10
    tiny = [
        TorusLattice(1, 4, 2.0),
        TorusLattice(1, 6, 2.0),
        TorusLattice(1, 8, 3.0),
        TorusLattice(2, 2, 1.0),
    ]
    worst = 0.0
    sampled = []
    for lat in tiny:
        for beta in (1, 2):
            for i in range(3):
                H = sample_rbm(lat, beta, _key(1, beta, 10 * lat.n_sites + i)).H
                sampled.append(H)
                for n in range(2, 7):
                    gap = np.abs(
                        nbw.nb_power(H, n, "edge_operator") - nbw.nb_power(H, n, "bruteforce")
                    )
                    worst = max(worst, float(gap.max()))
    # the degree-2 power is H^2 - I on every matrix sampled above, plus two
    # full-size draws
    for beta in (1, 2):
        sampled.append(sample_rbm(TorusLattice(1, 32, 8.0), beta, _key(1, 4 + beta, 0)).H)
    worst_v2 = max(
        float(np.max(np.abs(nbw.nb_power(H, 2) - (H @ H - np.eye(len(H)))))) for H in sampled
    )
    ok = worst <= tol and worst_v2 <= tol
    acceptance_report(
        "c02 walk-oracle-equivalence", ok,
        f"edge vs brute {worst:.2e}, V2 residual {worst_v2:.2e}, both <= {tol:g}",
    )
    assert ok


def test_c03_kernel_suite(acceptance_report):
    lat = TorusLattice(1, 64, 8.0)
    # dual-sum identity for the periodized Gaussian
    xs = np.array([[v] for v in (0.0, 0.123, 0.37, 0.5)])
    poisson = 0.0
    for s in (0.3, 1.0, 2.5):
        S = s * np.eye(1)
        direct, dual = _theta_direct(xs, S, 1e-16), _theta_dual(xs, S, 1e-16)
        poisson = max(poisson, float(np.max(np.abs(direct - dual) / np.abs(dual))))
    # semigroup property against a direct convolution
    p3, p4, p7 = (transition_n(lat, m) for m in (3, 4, 7))
    conv = np.zeros_like(p4)
    for b in np.ndindex(p3.shape):
        conv += p3[b] * np.roll(p4, shift=b, axis=(0,))
    ck = float(np.max(np.abs(conv - p7)))
    # local limit: closed theta form against exact convolution powers
    llt = 0.0
    for n in range(1, 51):
        pc = transition_n(lat, n, "convolution")
        pt = transition_n(lat, n, "theta")
        llt = max(llt, float(np.max(np.abs(pt - pc) / pc)))
    # Gaussian envelope constant and a randomized splitting-ratio scan
    c1 = heat_kernel_constant(lat, range(1, 51), c2=0.4)
    rng = np.random.Generator(np.random.Philox(key=(7, 7)))
    split = 0.0
    for _ in range(100):
        n3 = int(rng.integers(1, 21))
        n2 = int(rng.integers(n3, 21))
        n1 = int(rng.integers(n2, 21))
        x1, x2, x3 = (rng.integers(0, lat.L, size=1) for _ in range(3))
        split = max(split, vertex_split_ratio(lat, n1, n2, n3, x1, x2, x3))
    ok = poisson <= 1e-10 and ck <= 1e-12 and llt <= 1e-6 and c1 <= 3.0 and math.isfinite(split)
    acceptance_report(
        "c03 kernel-suite", ok,
        f"duality {poisson:.1e}, semigroup {ck:.1e}, local limit {llt:.1e}, "
        f"C1 {c1:.3f} <= 3, split scan max {split:.3f} finite",
    )
    assert ok


# ---------------------------------------------------------------------------
# statistical proxies through the recipes


def test_c04_trace_reduction(acceptance_report, tmp_path):
    code, manifest, _ = _run("moment_reduction", tmp_path, **{"run.samples": 100000})
    comps = {k: c for k, c in _comparisons(manifest).items() if k.endswith(".reduction")}
    margin = max(c["measurement"] / c["prediction"] for c in comps.values())
    ok = code == 0 and len(comps) == 5 and all(c["classification"] == "pass" for c in comps.values())
    acceptance_report(
        "c04 trace-reduction", ok,
        f"n in 4..12 at 1e5 samples; worst |ratio-1| at {margin:.0%} of its allowance",
    )
    assert ok


def test_c05_singular_tables(acceptance_report):
    tables = {
        1: [],
        2: [(1, 0), (0, 1)],
        3: [(1, 0), (0, 1), (0, 2)],
        4: [(1, 0), (1, 1), (2, 0), (0, 1), (0, 2), (0, 3), (0, 4)],
    }
    ok = all(dl.singular_table(d) == rows for d, rows in tables.items())
    # divergence witnesses: the tadpole above one dimension, the doubled
    # triangle at four, each matching a published singular pattern
    assert dl.singular_patterns(2) == ("tadpole",)
    for d in (2, 3, 4):
        scan = dl.singularity_scan(dl.demo_graph("tadpole"), d)
        ok = ok and scan.verdict == "divergent" and scan.witness_profile == (1, 0)
    theta4 = dl.singularity_scan(dl.demo_graph("theta"), 4)
    ok = (
        ok
        and theta4.verdict == "divergent"
        and theta4.witness_profile in dl.singular_patterns(4)
        and dl.singularity_scan(dl.demo_graph("theta"), 2.9).verdict == "convergent"
    )
    acceptance_report(
        "c05 singular-tables", ok,
        "pair sets exact for d=1..4; tadpole and doubled-triangle witnesses match",
    )
    assert ok


def test_c06_count_volume_constants(acceptance_report):
    targets = {(1, 1): math.sqrt(2.0) / 2.0, (1, 2): math.sqrt(5.0) / 5.0}
    gaps = {}
    for coeffs, limit in targets.items():
        system = dl.WeightSystem((coeffs,), (0,) * len(coeffs), (2,))
        trend = dl.c_constant(system, [100, 1000, 10000])
        gaps[coeffs] = abs(trend.limit - limit)
    ok = all(g <= 1e-3 for g in gaps.values())
    acceptance_report(
        "c06 count-volume-constants", ok,
        f"|x+y - sqrt2/2| {gaps[(1, 1)]:.1e}, |x+2y - sqrt5/5| {gaps[(1, 2)]:.1e}, both <= 1e-3",
    )
    assert ok


def test_c07_graph_integrals(acceptance_report):
    # adaptive quadrature of the doubled-triangle box integral in d = 1
    f = lambda a3, a2, a1: (a1 * a2 + a1 * a3 + a2 * a3) ** -0.5
    oracle, _ = integrate.tplquad(f, 0, 1, 0, 1, 0, 1, epsabs=1e-10, epsrel=1e-10)
    res = dl.graph_integral(dl.demo_graph("theta"), 1.0, mc_samples=200000,
                            seed=20260815, threads=THREADS)
    z = (res.value - oracle) / res.se
    # every convergent estimate stays under its analytic sector bound
    bounded = True
    for name, d in (("triangle", 1.0), ("two_cycle", 1.0), ("theta", 1.0),
                    ("theta", 2.0), ("k4", 1.0)):
        r = dl.graph_integral(dl.demo_graph(name), d, mc_samples=40000, seed=3)
        bounded = bounded and r.verdict == "convergent" and r.value <= r.bound
    ok = abs(z) <= 3.0 and bounded
    acceptance_report(
        "c07 graph-integrals", ok,
        f"MC {res.value:.4f} vs quadrature {oracle:.4f}, z {z:+.2f}; "
        "five convergent cases under their sector bounds",
    )
    assert ok


# ---------------------------------------------------------------------------
# polynomial asymptotics


def test_c08_polynomial_asymptotics(acceptance_report):
    n, a4v = 1000, 1e-4
    grid = np.linspace(0.0, math.sqrt(1.0 - a4v), 201)
    # interior of the spectral interval; the closed right endpoint is pinned
    # separately below as a known failure
    envelope = pe.envelope_gap(n, grid[:-1], a4v)
    contour = 0.0
    a2l_map = {3: 2e-4, 4: 1e-4}
    for m in (5, 20, 100, 500):
        for x in (0.0, 0.5, 0.9, 0.999, 1.0):
            rec = float(pe.eval_scalar(m, 2 * x, a4=1e-4, a2l=a2l_map))
            con = pe.contour_eval(m, 2 * x, a4=1e-4, a2l=a2l_map)
            contour = max(contour, abs(con - rec) / max(1.0, abs(rec)))
    M, t = 200, 1.0
    sinc_gap = 0.0
    for y in (-1.0, -4.0):
        got = pe.chebyshev_u(int(t * M), 1 + y / (2 * M**2)) / (t * M)
        r = math.sqrt(-y)
        sinc_gap = max(sinc_gap, abs(got - math.sin(t * r) / (t * r)))
    ok = envelope <= 0.01 and contour <= 1e-8 and sinc_gap <= 5e-3
    acceptance_report(
        "c08 polynomial-asymptotics", ok,
        f"envelope {envelope:.1e} <= 0.01 (interior grid), contour {contour:.1e} <= 1e-8, "
        f"sinc {sinc_gap:.1e} <= 5e-3",
    )
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="at the closed right endpoint the envelope gap is genuinely of "
    "order n*a4 (measured 0.088 at n=1000, a4=1e-4) because the degree-n "
    "Chebyshev value n+1 amplifies the tadpole shift of the edge; the "
    "0.01 calibration holds on the half-open interval (gap 5e-4); "
    "ledgered in notes/decisions.md",
)
def test_c08_envelope_closed_endpoint(acceptance_report):
    n, a4v = 1000, 1e-4
    grid = np.linspace(0.0, math.sqrt(1.0 - a4v), 201)
    gap = pe.envelope_gap(n, grid, a4v)
    acceptance_report(
        "c08 envelope-closed-endpoint", gap <= 0.01,
        f"gap {gap:.3f} > 0.01 at the endpoint; expected failure, order n*a4",
    )
    assert gap <= 0.01


def test_c09_loop_weights(acceptance_report):
    lat = TorusLattice(1, 64, 16.0)
    asym = pe.asymptotic_a2l(1, 16.0, 5)
    rels = {l: abs(a2l(lat, l).value / asym[l] - 1.0) for l in (3, 4, 5)}
    lat2 = TorusLattice(1, 128, 32.0)
    ratio = a2l(lat2, 3).value / a2l(lat, 3).value
    scaling = abs(ratio / 0.5 - 1.0)
    ok = all(r <= 0.30 for r in rels.values()) and scaling <= 0.10
    acceptance_report(
        "c09 loop-weights", ok,
        f"free-return asymptote off by {rels[3]:.1%}/{rels[4]:.1%}/{rels[5]:.1%} (l=3,4,5) "
        f"<= 30%; doubling ratio {ratio:.4f} within {scaling:.1%} of 1/2",
    )
    assert ok


# ---------------------------------------------------------------------------
# edge law and factorization


def test_c10_edge_law_beta2(acceptance_report, tmp_path):
    code, manifest, _ = _run("edge_universality", tmp_path, **{"model.beta": "2"})
    ks = _comparisons(manifest)["edge.beta2.ks"]
    ok = code == 0 and ks["classification"] == "pass"
    acceptance_report(
        "c10 edge-law-beta2", ok,
        f"KS {ks['measurement']:.4f} <= 0.06 on 2000+2000 rescaled maxima at N=128",
    )
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="the infinite-volume shift convention subtracts the full "
    "flat-profile loop mass that the finite GOE baseline still carries, "
    "displacing the rescaled maxima by about 3 units (KS 0.84); with a "
    "like-for-like sampled-baseline shift the distance drops to 0.106, "
    "still above the 0.06 gate at 2000 samples; ledgered in "
    "notes/decisions.md",
)
def test_c10_edge_law_beta1(acceptance_report, tmp_path):
    code, manifest, _ = _run("edge_universality", tmp_path, **{"model.beta": "1"})
    comps = _comparisons(manifest)
    ks = comps["edge.beta1.ks"]
    ks2 = comps["edge.beta1.ks_sampled_baseline"]
    ok = code == 0 and ks["classification"] == "pass"
    acceptance_report(
        "c10 edge-law-beta1", ok,
        f"KS {ks['measurement']:.3f} > 0.06 under the limit shift "
        f"(sampled-baseline {ks2['measurement']:.3f}); expected failure",
    )
    assert ok


def test_c11_factorization(acceptance_report, tmp_path):
    code, manifest, _ = _run("factorization", tmp_path)
    comp = _comparisons(manifest)["fact.factorization"]
    ok = code == 0 and comp["classification"] == "pass" and abs(comp["z"]) <= 3.0
    acceptance_report(
        "c11 factorization", ok,
        f"cross-moment gap z {comp['z']:+.2f} within 3 at 1e4 samples, L=1024, W=64",
    )
    assert ok


# ---------------------------------------------------------------------------
# return exponents and determinism


def test_c12_return_exponents(acceptance_report):
    grid = [125, 250, 500, 1000]
    te = {d: dl.tadpole_exponent(d, 8.0, grid) for d in (1, 2, 3)}
    ok = (
        abs(te[1]["slope"] - 0.5) <= 0.05
        and abs(te[2]["slope"]) <= 0.05
        and te[2]["log_r2"] >= 0.99
        and te[3]["range_ratio"] <= 1.5
    )
    acceptance_report(
        "c12 return-exponents", ok,
        f"slopes {te[1]['slope']:.4f} (target 0.5) and {te[2]['slope']:.4f} (target 0), "
        f"log fit R2 {te[2]['log_r2']:.6f}, d=3 partial sums within ratio "
        f"{te[3]['range_ratio']:.3f}",
    )
    assert ok


def test_c13_determinism(acceptance_report, tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[lattice]\nL = 16\nW = 4\n[run]\nsamples = 200\nseed = 11\ndegrees = 4 6\n")

    def run(recipe, out, extra=()):
        cmd = [sys.executable, "-m", "rbmlab.exp_cli", recipe, "--out", str(out), *extra]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return (out / "result.csv").read_bytes()

    a = run("moment_reduction", tmp_path / "a", ("--config", str(ini), "--threads", "1"))
    b = run("moment_reduction", tmp_path / "b", ("--config", str(ini), "--threads", "1"))
    c = run("moment_reduction", tmp_path / "c", ("--config", str(ini), "--threads", "4"))
    d1 = run("llt_check", tmp_path / "d1")
    d2 = run("llt_check", tmp_path / "d2")
    ok = a == b == c and d1 == d2 and a.count(b"\n") > 5
    acceptance_report(
        "c13 determinism", ok,
        "byte-identical result.csv on rerun, including across 1 vs 4 threads",
    )
    assert ok
