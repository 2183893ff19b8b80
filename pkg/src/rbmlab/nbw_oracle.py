"""Exact non-backtracking path sums and the identity oracles built on them.

Everything here is exact per sample: either an edge-operator recursion or a
vectorized enumeration of walk arrays with indicator masks.  The identity
checks return max entrywise residuals, which vanish (to rounding) for any
unimodular band sample regardless of the draw, so nonzero residuals flag
implementation bugs rather than statistics.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import poly_engine
from .poly_engine import PolyFamilySpec
from .rbm_model import ValueWithError, sample_rbm
from .torus_walk import TorusLattice

_BUDGET = 10**7
_EDGE_OP_CAP = 320


class PathBudgetError(RuntimeError):
    """Predicted enumeration size exceeds the path budget."""


_walk_cache: dict = {}


def predicted_walks(N: int, s: int) -> int:
    """Exact count of length-s sequences with x_i != x_{i+2} (full support)."""
    if s <= 0:
        return N
    return N * N * max(N - 1, 1) ** (s - 1)


def _require_budget(count: int, budget: int) -> None:
    if count > budget:
        raise PathBudgetError(f"predicted {count} paths exceeds budget {budget}")


def _nb_walks(N: int, s: int) -> np.ndarray:
    """All vertex sequences x_0..x_s with x_i != x_{i+2}, one row per walk."""
    key = (N, s)
    if key in _walk_cache:
        return _walk_cache[key]
    paths = np.arange(N, dtype=np.int32)[:, None]
    for t in range(1, s + 1):
        K = paths.shape[0]
        rep = np.repeat(paths, N, axis=0)
        nxt = np.tile(np.arange(N, dtype=np.int32), K)[:, None]
        paths = np.concatenate([rep, nxt], axis=1)
        if t >= 2:
            paths = paths[paths[:, t] != paths[:, t - 2]]
    _walk_cache[key] = paths
    return paths


def _phis(H: np.ndarray) -> dict:
    h2 = np.abs(H) ** 2
    return {1: H, 3: -h2 * H, 5: 2 * h2**2 * H, 7: -(h2**3) * H}


def _compositions_13(m: int) -> list[tuple[int, ...]]:
    """Ordered tuples over {1,3} summing to m (the empty tuple for m = 0)."""
    if m < 0:
        return []
    if m == 0:
        return [()]
    out = []
    for k3 in range(m // 3 + 1):
        k1 = m - 3 * k3
        s = k1 + k3
        for pos in itertools.combinations(range(s), k3):
            b = [1] * s
            for p in pos:
                b[p] = 3
            out.append(tuple(b))
    return out


def _walk_weight(phis: dict, walks: np.ndarray, b: tuple) -> np.ndarray:
    w = None
    for i, bi in enumerate(b, start=1):
        g = phis[bi][walks[:, i - 1], walks[:, i]]
        w = g if w is None else w * g
    return w


def _bincount_into(N: int, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(w):
        re = np.bincount(idx, weights=w.real, minlength=N * N)
        im = np.bincount(idx, weights=w.imag, minlength=N * N)
        return (re + 1j * im).reshape(N, N)
    return np.bincount(idx, weights=w, minlength=N * N).reshape(N, N)


def _loop_event(walks: np.ndarray, i: int, l: int) -> np.ndarray:
    """Indicator of x_t = x_{t+l} for t = i..i+l (zero when out of range)."""
    s = walks.shape[1] - 1
    if i + 2 * l > s:
        return np.zeros(walks.shape[0], dtype=bool)
    m = np.ones(walks.shape[0], dtype=bool)
    for t in range(i, i + l + 1):
        m &= walks[:, t] == walks[:, t + l]
    return m


def _loop_free(walks: np.ndarray, i: int, R: int) -> np.ndarray:
    m = np.ones(walks.shape[0], dtype=bool)
    for l in range(3, R + 1):
        m &= ~_loop_event(walks, i, l)
    return m


def _loop_free_interval(walks: np.ndarray, t0: int, t1: int, R: int) -> np.ndarray:
    m = np.ones(walks.shape[0], dtype=bool)
    for i in range(t0, t1 + 1):
        m &= _loop_free(walks, i, R)
    return m


def _zero_like(H: np.ndarray) -> np.ndarray:
    return np.zeros_like(H)


def nb_power(H: np.ndarray, n: int, mode: str = "edge_operator", budget: int = _BUDGET) -> np.ndarray:
    """Non-backtracking power V_n: all length-n walks with x_i != x_{i+2}.

    edge_operator propagates amplitudes on directed edges,
    new(v->w) = H_vw (S(v) - old(w->v)), and never enumerates paths;
    bruteforce sums the walk array directly.  V_0 = I and V_1 = H.
    """
    N = H.shape[0]
    if n < 0:
        return _zero_like(H)
    if n == 0:
        return np.eye(N, dtype=H.dtype)
    if n == 1:
        return H.copy()
    if mode == "edge_operator":
        if N > _EDGE_OP_CAP:
            raise ValueError(f"edge_operator tensor too large for N = {N}")
        ar = np.arange(N)
        C = np.zeros((N, N, N), dtype=H.dtype)
        C[ar, ar, :] = H
        for _ in range(2, n + 1):
            S = C.sum(axis=1)
            C = H[None, :, :] * (S[:, :, None] - C.transpose(0, 2, 1))
        return C.sum(axis=1)
    if mode == "bruteforce":
        _require_budget(predicted_walks(N, n), budget)
        walks = _nb_walks(N, n)
        w = _walk_weight({1: H}, walks, (1,) * n)
        return _bincount_into(N, walks[:, 0] * N + walks[:, n], w)
    raise ValueError(f"unknown mode {mode!r}")


def nb_trace_profile(H: np.ndarray, n_max: int) -> np.ndarray:
    """Tr V_n for n = 0..n_max in one edge-operator sweep."""
    N = H.shape[0]
    if N > _EDGE_OP_CAP:
        raise ValueError(f"edge_operator tensor too large for N = {N}")
    out = np.zeros(n_max + 1)
    out[0] = N
    if n_max == 0:
        return out
    out[1] = float(np.real(np.trace(H)))
    ar = np.arange(N)
    C = np.zeros((N, N, N), dtype=H.dtype)
    C[ar, ar, :] = H
    for t in range(2, n_max + 1):
        S = C.sum(axis=1)
        C = H[None, :, :] * (S[:, :, None] - C.transpose(0, 2, 1))
        out[t] = float(np.real(C.sum(axis=1)[ar, ar].sum()))
    return out


def calv_power(
    H: np.ndarray,
    n: int,
    R: int | None = None,
    drop_phi3: bool = False,
    budget: int = _BUDGET,
) -> np.ndarray:
    """Almost non-backtracking power: blocks b_i in {1,3} with total weight n.

    With R the loop-free indicator over the whole walk is applied, giving
    the truncated power.  drop_phi3 keeps only b = (1,..,1), which recovers
    V_n.  The weight-1 power is H (the recursion's initial data; the
    alternative identity-matrix convention is inconsistent with it).
    """
    N = H.shape[0]
    if n < 0:
        return _zero_like(H)
    if n == 0:
        return np.eye(N, dtype=H.dtype)
    bs = _compositions_13(n)
    if drop_phi3:
        bs = [b for b in bs if 3 not in b]
    _require_budget(sum(predicted_walks(N, len(b)) for b in bs), budget)
    phis = _phis(H)
    out = _zero_like(H)
    for b in bs:
        s = len(b)
        walks = _nb_walks(N, s)
        w = _walk_weight(phis, walks, b)
        if R is not None:
            w = w * _loop_free_interval(walks, 0, s, R)
        out = out + _bincount_into(N, walks[:, 0] * N + walks[:, s], w)
    return out


def loopfree_power(H: np.ndarray, n: int, R: int, budget: int = _BUDGET) -> np.ndarray:
    """Loop-free matrix power: b = (1,..,1) walks carrying the cutoff-R
    loop-free indicator over every starting step."""
    N = H.shape[0]
    if n < 0:
        return _zero_like(H)
    if n == 0:
        return np.eye(N, dtype=H.dtype)
    _require_budget(predicted_walks(N, n), budget)
    walks = _nb_walks(N, n)
    w = _walk_weight({1: H}, walks, (1,) * n) * _loop_free_interval(walks, 0, n, R)
    return _bincount_into(N, walks[:, 0] * N + walks[:, n], w)


def ub_block(H: np.ndarray, c: int, m: int, R: int | None = None, budget: int = _BUDGET) -> np.ndarray:
    """Marked block sum: b_1 = c in {5,7}, the rest in {1,3} with weight m.

    Total weight is m + c; the non-backtracking constraint runs across the
    whole walk and the loop-free indicator is applied when R is given.
    """
    if c not in (5, 7):
        raise ValueError(f"marked block must be 5 or 7, got {c}")
    N = H.shape[0]
    if m < 0:
        return _zero_like(H)
    rests = _compositions_13(m)
    _require_budget(sum(predicted_walks(N, len(r) + 1) for r in rests), budget)
    phis = _phis(H)
    out = _zero_like(H)
    for rest in rests:
        b = (c,) + rest
        s = len(b)
        walks = _nb_walks(N, s)
        w = _walk_weight(phis, walks, b)
        if R is not None:
            w = w * _loop_free_interval(walks, 0, s, R)
        out = out + _bincount_into(N, walks[:, 0] * N + walks[:, s], w)
    return out


def a4_vector(H: np.ndarray) -> np.ndarray:
    """Row sums sum_y |H_xy|^4 (constant across x for torus profiles)."""
    return (np.abs(H) ** 4).sum(axis=1)


def loop_coefficient(H: np.ndarray, t: int, R: int, budget: int = _BUDGET) -> np.ndarray:
    """Diagonal double-loop weight of total block weight 2t and cutoff R.

    Sums doubled loops of half-length l = 3..R with no shorter period,
    whose 2l blocks lie in {1,3} with b_1 = 1 and total weight 2t.  Entries
    are deterministic at beta = 1 (signs square away) and carry random
    phases at beta = 2, which is why the identities need the diagonal form.
    """
    N = H.shape[0]
    phis = _phis(H)
    out = np.zeros(N, dtype=H.dtype)
    for l in range(3, R + 1):
        k3 = t - l
        if k3 < 0 or k3 > 2 * l - 1:
            continue
        _require_budget(N**l, budget)
        core = np.indices((N,) * l, dtype=np.int32).reshape(l, -1).T
        doubled = np.concatenate([core, core, core[:, :1]], axis=1)
        mask = np.ones(doubled.shape[0], dtype=bool)
        for i in range(0, 2 * l - 1):
            mask &= doubled[:, i] != doubled[:, i + 2]
        for i in range(3, l):
            mask &= ~_loop_event(doubled, 0, i)
        doubled = doubled[mask]
        if doubled.shape[0] == 0:
            continue
        for pos in itertools.combinations(range(1, 2 * l), k3):
            b = [1] * (2 * l)
            for p in pos:
                b[p] = 3
            w = _walk_weight(phis, doubled, tuple(b))
            if np.iscomplexobj(out):
                out += np.bincount(doubled[:, 0], weights=w.real, minlength=N) + 1j * np.bincount(
                    doubled[:, 0], weights=w.imag, minlength=N
                )
            else:
                out += np.bincount(doubled[:, 0], weights=w, minlength=N)
    return out


def e2_block(H: np.ndarray, n: int, R: int, budget: int = _BUDGET) -> np.ndarray:
    """Signed error block: the prepended step backtracks (x_0 = x_2) while
    the loop-free condition fails at the walk origin but holds beyond it."""
    N = H.shape[0]
    out = _zero_like(H)
    phis = _phis(H)
    bs = _compositions_13(n - 1)
    _require_budget(sum(predicted_walks(N, len(b)) for b in bs), budget)
    for b in bs:
        s = len(b)
        y = _nb_walks(N, s)
        mask = (~_loop_free(y, 0, R)) & _loop_free_interval(y, 1, s, R)
        if not mask.any():
            continue
        w = _walk_weight(phis, y, b) * H[y[:, 1], y[:, 0]] * mask
        out = out - _bincount_into(N, y[:, 1] * N + y[:, s], w)
    return out


def e3_block(H: np.ndarray, n: int, R: int, budget: int = _BUDGET) -> np.ndarray:
    """Signed error block: the walk starts with a doubled loop of minimal
    half-length l <= R, with the census factor that removes the part
    already counted by the loop coefficient times a shorter power."""
    N = H.shape[0]
    out = _zero_like(H)
    phis = _phis(H)
    for b in _compositions_13(n - 1):
        s = len(b)
        for l in range(3, R + 1):
            if 2 * l > s + 1:
                continue
            f = s + 1 - 2 * l
            _require_budget(N**l * N**f, budget)
            core = np.indices((N,) * l, dtype=np.int32).reshape(l, -1).T
            head = np.concatenate([core, core, core[:, :1]], axis=1)
            hmask = np.ones(head.shape[0], dtype=bool)
            for i in range(0, 2 * l - 1):
                hmask &= head[:, i] != head[:, i + 2]
            for i in range(3, l):
                hmask &= ~_loop_event(head, 0, i)
            head = head[hmask]
            if head.shape[0] == 0:
                continue
            if f > 0:
                tail = np.indices((N,) * f, dtype=np.int32).reshape(f, -1).T
                seq = np.concatenate(
                    [np.repeat(head, tail.shape[0], axis=0),
                     np.tile(tail, (head.shape[0], 1))],
                    axis=1,
                )
            else:
                seq = head
            mask = np.ones(seq.shape[0], dtype=bool)
            for i in range(2 * l, s):
                mask &= seq[:, i] != seq[:, i + 2]
            mask &= _loop_free_interval(seq, 2 * l, s + 1, R)
            if s + 1 > 2 * l:
                sub = seq[:, 2 * l - 1] != seq[:, 2 * l + 1]
            else:
                # the walk ends on the loop: the clean factorization onto
                # the identity power is vacuously non-backtracking
                sub = np.ones(seq.shape[0], dtype=bool)
            sub = sub & _loop_free_interval(seq, 1, 2 * l - 1, R)
            mask &= ~sub
            if not mask.any():
                continue
            w = H[seq[:, 0], seq[:, 1]]
            for i, bi in enumerate(b, start=1):
                w = w * phis[bi][seq[:, i], seq[:, i + 1]]
            out = out - _bincount_into(N, seq[:, 0] * N + seq[:, s + 1], w * mask)
    return out


def lemma_recursion_residual(H: np.ndarray, n: int, budget: int = _BUDGET) -> float:
    """Max residual of the almost-non-backtracking recursion at weight n."""
    lhs = calv_power(H, n, budget=budget)
    rhs = (
        H @ calv_power(H, n - 1, budget=budget)
        - calv_power(H, n - 2, budget=budget)
        + a4_vector(H)[:, None] * calv_power(H, n - 4, budget=budget)
        - ub_block(H, 5, n - 5, budget=budget)
        - ub_block(H, 7, n - 7, budget=budget)
    )
    return float(np.max(np.abs(lhs - rhs)))


def p_expansion_residual(H: np.ndarray, n: int, budget: int = _BUDGET) -> float:
    """Max residual of the modified-polynomial path expansion at degree n."""
    lhs = poly_engine.poly_matrix(H, n, a4=a4_vector(H))
    N = H.shape[0]
    ub = {}
    for c in (5, 7):
        for m in range(0, n - c + 1):
            ub[(c, m)] = ub_block(H, c, m, budget=budget)
    G = {0: np.eye(N, dtype=H.dtype)}
    for w in range(1, n + 1):
        acc = _zero_like(H)
        for (c, m), blk in ub.items():
            if c + m <= w:
                acc = acc + blk @ G[w - c - m]
        G[w] = acc
    rhs = _zero_like(H)
    for l0 in range(0, n + 1):
        if np.any(G[n - l0]):
            rhs = rhs + calv_power(H, l0, budget=budget) @ G[n - l0]
    return float(np.max(np.abs(lhs - rhs)))


def vn_relation_residual(H: np.ndarray, n: int, R: int, budget: int = _BUDGET) -> float:
    """Max residual of the loop-free recursion with its three error blocks."""
    lhs = H @ calv_power(H, n - 1, R=R, budget=budget)
    rhs = (
        calv_power(H, n, R=R, budget=budget)
        + calv_power(H, n - 2, R=R, budget=budget)
        - a4_vector(H)[:, None] * calv_power(H, n - 4, R=R, budget=budget)
        + ub_block(H, 5, n - 5, R=R, budget=budget)
        + ub_block(H, 7, n - 7, R=R, budget=budget)
        + e2_block(H, n, R, budget=budget)
        + e3_block(H, n, R, budget=budget)
    )
    for l in range(3, 3 * R + 1):
        if n - 2 * l >= 0:
            rhs = rhs + loop_coefficient(H, l, R, budget=budget)[:, None] * calv_power(
                H, n - 2 * l, R=R, budget=budget
            )
    return float(np.max(np.abs(lhs - rhs)))


def renorm_polynomial(H: np.ndarray, n: int, R: int, budget: int = _BUDGET) -> np.ndarray:
    """Renormalization polynomial of H with the exact diagonal coefficients."""
    a2l = {l: loop_coefficient(H, l, R, budget=budget) for l in range(3, 3 * R + 1)}
    return poly_engine.poly_matrix(H, n, a4=a4_vector(H), a2l=a2l)


def renorm_expansion_residual(H: np.ndarray, n: int, R: int, budget: int = _BUDGET) -> float:
    """Max residual of the renormalized path expansion at degree n."""
    lhs = renorm_polynomial(H, n, R, budget=budget)
    N = H.shape[0]
    eblocks = {}
    for m in range(1, n + 1):
        acc = ub_block(H, 5, m - 5, R=R, budget=budget) + ub_block(H, 7, m - 7, R=R, budget=budget)
        acc = acc + e2_block(H, m, R, budget=budget) + e3_block(H, m, R, budget=budget)
        eblocks[m] = acc
    G = {0: np.eye(N, dtype=H.dtype)}
    for w in range(1, n + 1):
        acc = _zero_like(H)
        for m in range(1, w + 1):
            acc = acc + eblocks[m] @ G[w - m]
        G[w] = acc
    rhs = _zero_like(H)
    for l0 in range(0, n + 1):
        rhs = rhs + calv_power(H, l0, R=R, budget=budget) @ G[n - l0]
    return float(np.max(np.abs(lhs - rhs)))


@dataclass(frozen=True)
class MomentEstimate:
    """Monte Carlo estimate of E[prod_i Tr X_{n_i}] with per-factor means."""

    label: str
    degrees: tuple
    product: ValueWithError
    marginals: tuple
    samples: int
    seed: int

    def as_row(self) -> dict:
        return {
            "object": self.label,
            "degrees": "x".join(str(n) for n in self.degrees),
            "estimate": self.product.value,
            "stderr": self.product.se,
            "samples": self.samples,
            "seed": self.seed,
        }


def _trace_chunk(lat, beta, spec, degrees, seed, lo, hi, mc_mode):
    n_max = max(degrees)
    rows = np.empty((hi - lo, len(degrees)))
    for i in range(lo, hi):
        sample = sample_rbm(lat, beta, seed=(seed, i))
        H = sample.H
        if spec == "V":
            prof = nb_trace_profile(H, n_max)
            rows[i - lo] = [prof[n] for n in degrees]
        else:
            a4c, a2l = spec.coefficients()
            if mc_mode == "exact":
                vals = poly_engine.trace_poly(H, n_max, a4=a4c, a2l=a2l, all_orders=True)
            else:
                vals, _ = poly_engine.trace_poly(
                    H, n_max, a4=a4c, a2l=a2l, mode="hutchinson", probes=1,
                    seed=(seed, (1 << 32) + i), all_orders=True,
                )
            rows[i - lo] = [float(np.real(vals[n])) for n in degrees]
    return rows


def moment_mc(
    lat: TorusLattice,
    beta: int,
    spec,
    degrees: list,
    k: int | None = None,
    samples: int = 1000,
    seed: int = 0,
    threads: int = 1,
    mc_mode: str = "auto",
) -> MomentEstimate:
    """Monte Carlo E[prod_i Tr X_{n_i}] over independent band samples.

    spec is "V" (non-backtracking powers, traced exactly by the edge
    operator) or a PolyFamilySpec (traced through the spectrum for small N,
    by a single Hutchinson probe otherwise).  Deterministic in seed; with
    threads > 1 samples are split into deterministic chunks.
    """
    if spec != "V" and not isinstance(spec, PolyFamilySpec):
        raise ValueError("spec must be 'V' or a PolyFamilySpec")
    degrees = tuple(int(n) for n in degrees)
    if k is not None and k != len(degrees):
        raise ValueError(f"k = {k} does not match {len(degrees)} degrees")
    if mc_mode == "auto":
        mc_mode = "exact" if lat.n_sites <= 512 else "hutchinson"
    if mc_mode not in ("exact", "hutchinson"):
        raise ValueError(f"unknown mc_mode {mc_mode!r}")
    bounds = np.linspace(0, samples, max(threads, 1) + 1).astype(int)
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(
                ex.map(lambda c: _trace_chunk(lat, beta, spec, degrees, seed, c[0], c[1], mc_mode), chunks)
            )
    else:
        parts = [_trace_chunk(lat, beta, spec, degrees, seed, lo, hi, mc_mode) for lo, hi in chunks]
    rows = np.concatenate(parts, axis=0)
    prod = rows.prod(axis=1)
    label = "V" if spec == "V" else spec.family
    marginals = tuple(
        ValueWithError(float(rows[:, j].mean()), float(rows[:, j].std(ddof=1) / np.sqrt(samples)))
        for j in range(len(degrees))
    )
    product = ValueWithError(float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(samples)))
    return MomentEstimate(
        label=label, degrees=degrees, product=product, marginals=marginals,
        samples=samples, seed=seed,
    )
