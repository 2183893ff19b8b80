"""Diagram calculus: circuit-cover enumeration, Symanzik polynomials, the
ultraviolet singularity criterion, weight-count constants, graph integrals,
and lattice diagram functions in the three random-walk regimes.

Conventions used throughout:

- A multigraph stores edges as (u, v) pairs with u <= v; the tuple position is
  the edge id, so parallel edges are distinct variables.  A self-loop adds two
  to its vertex degree and never enters a spanning tree.
- A diagram is a multigraph plus an ordered tuple of closed circuits, one per
  trace factor.  Circuits start and end at their marked (degree-1) vertex,
  traverse every edge exactly twice in total (once per direction on complex
  samples, self-loops always twice), and never follow an edge by its own
  immediate reverse, except that a real sample may repeat a self-loop.  Two
  diagrams are the same object when a color-preserving vertex relabeling plus
  a parallel-edge relabeling maps circuits to circuits slotwise.
- Continuous weight polytopes {w >= lb : sum_e c_i(e) w_e = n_i} are measured
  with the codimension-k surface volume, the convention under which the
  count/volume ratios below have the stated limits (sqrt(2)/2 for x + y = n).
  Reduced integrals over the tail-eliminated inequality domain carry the
  elimination Jacobian so the same constant applies to both forms.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .rbm_model import ValueWithError
from .torus_walk import TorusLattice, classify_regime, fourier_profile, theta

_SUBSET_CAP = 18  # edge count above which 1VI subset scans refuse to run
_COVER_CAP = 500_000  # raw circuit covers per graph before aborting
_STATE_CAP = 5_000_000  # weight-count DP states before aborting
_FLOW_CAP = 1 << 21  # momentum flow configurations per diagram
_DP_MEM = 1 << 26  # bytes of generating-sum DP table per flow block


class EnumerationBudgetError(RuntimeError):
    """Predicted enumeration size exceeds the budget."""


# ---------------------------------------------------------------------------
# multigraphs


@dataclass(frozen=True)
class Multigraph:
    """Undirected multigraph; edge ids are positions in the edge tuple."""

    n_vertices: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        norm = tuple((min(u, v), max(u, v)) for u, v in self.edges)
        object.__setattr__(self, "edges", norm)
        if any(u < 0 or v >= self.n_vertices for u, v in norm):
            raise ValueError("edge endpoint outside vertex range")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_vertices, dtype=int)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def loops(self) -> tuple[int, ...]:
        return tuple(i for i, (u, v) in enumerate(self.edges) if u == v)

    @property
    def cycle_rank(self) -> int:
        return self.n_edges - self.n_vertices + len(_components(self))

    def is_connected(self) -> bool:
        return len(_components(self)) == 1


def _components(graph: Multigraph, edge_ids=None) -> list[set]:
    """Connected components; vertices restricted to edge endpoints when an
    edge subset is given, otherwise all vertices (isolated ones included)."""
    if edge_ids is None:
        edge_ids = range(graph.n_edges)
        verts = set(range(graph.n_vertices))
    else:
        verts = {w for i in edge_ids for w in graph.edges[i]}
    adj: dict[int, set] = {v: set() for v in verts}
    for i in edge_ids:
        u, v = graph.edges[i]
        adj[u].add(v)
        adj[v].add(u)
    seen: set[int] = set()
    comps = []
    for start in verts:
        if start in seen:
            continue
        stack, comp = [start], set()
        while stack:
            x = stack.pop()
            if x in comp:
                continue
            comp.add(x)
            stack.extend(adj[x] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def demo_graph(name: str) -> Multigraph:
    """Small named graphs used by tests and recipes."""
    table = {
        "edge": Multigraph(2, ((0, 1),)),
        "loop": Multigraph(1, ((0, 0),)),
        "tadpole": Multigraph(2, ((0, 1), (1, 1))),
        "two_cycle": Multigraph(2, ((0, 1), (0, 1))),
        "triangle": Multigraph(3, ((0, 1), (1, 2), (0, 2))),
        "theta": Multigraph(2, ((0, 1), (0, 1), (0, 1))),
        "k4": Multigraph(4, tuple(itertools.combinations(range(4), 2))),
    }
    if name not in table:
        raise ValueError(f"unknown demo graph {name!r}")
    return table[name]


# ---------------------------------------------------------------------------
# spanning trees and Symanzik polynomials


def spanning_trees(graph: Multigraph) -> list[tuple[int, ...]]:
    """All spanning trees as sorted edge-id tuples (loops never qualify)."""
    if not graph.is_connected():
        raise ValueError("spanning trees require a connected graph")
    non_loop = [i for i in range(graph.n_edges) if graph.edges[i][0] != graph.edges[i][1]]
    size = graph.n_vertices - 1
    if size == 0:
        return [()]
    out = []
    for combo in itertools.combinations(non_loop, size):
        verts = {w for i in combo for w in graph.edges[i]}
        if len(verts) == graph.n_vertices and len(_components(graph, combo)) == 1:
            out.append(tuple(combo))
    return out


def tree_count(graph: Multigraph) -> int:
    """Spanning tree count by the Laplacian cofactor determinant."""
    n = graph.n_vertices
    if n == 1:
        return 1
    lap = np.zeros((n, n))
    for u, v in graph.edges:
        if u == v:
            continue
        lap[u, u] += 1
        lap[v, v] += 1
        lap[u, v] -= 1
        lap[v, u] -= 1
    return int(round(float(np.linalg.det(lap[1:, 1:]))))


def symanzik(graph: Multigraph) -> tuple[tuple[int, ...], ...]:
    """First graph polynomial as a tuple of monomials.

    Each monomial is the sorted edge-id tuple complementary to one spanning
    tree; the polynomial value is the sum over monomials of prod alpha_e.
    The monomial count is cross-checked against the matrix-tree determinant.
    """
    trees = spanning_trees(graph)
    if len(trees) != tree_count(graph):
        raise AssertionError("spanning tree enumeration disagrees with matrix-tree count")
    all_ids = set(range(graph.n_edges))
    return tuple(tuple(sorted(all_ids - set(t))) for t in trees)


def symanzik_value(monomials, alpha: np.ndarray) -> np.ndarray:
    """Evaluate a Symanzik polynomial on alpha of shape (..., n_edges)."""
    alpha = np.asarray(alpha, dtype=float)
    total = np.zeros(alpha.shape[:-1])
    for mono in monomials:
        term = np.ones(alpha.shape[:-1])
        for e in mono:
            term = term * alpha[..., e]
        total += term
    return total


# ---------------------------------------------------------------------------
# one-vertex irreducibility and the singularity criterion


def _is_one_vi(graph: Multigraph, edge_ids) -> bool:
    """Connected with no cut vertex, where a vertex is cut when detaching all
    its edge-ends splits the subgraph (a self-loop detaches to its own part).
    Single edges and single loops count as irreducible."""
    if not edge_ids:
        return False
    if len(_components(graph, edge_ids)) != 1:
        return False
    if len(edge_ids) == 1:
        return True
    verts = {w for i in edge_ids for w in graph.edges[i]}
    for v in verts:
        parent: dict = {}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for i in edge_ids:
            u, w = graph.edges[i]
            a = ("c", i, 0) if u == v else u
            b = ("c", i, 1) if w == v else w
            parent.setdefault(a, a)
            parent.setdefault(b, b)
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb
        if len({find(x) for x in list(parent)}) > 1:
            return False
    return True


def one_vi_subgraphs(graph: Multigraph) -> list[tuple[int, ...]]:
    """All edge subsets inducing a one-vertex-irreducible subgraph."""
    if graph.n_edges > _SUBSET_CAP:
        raise EnumerationBudgetError(f"{graph.n_edges} edges exceeds the subset scan cap")
    out = []
    ids = range(graph.n_edges)
    for r in range(1, graph.n_edges + 1):
        for combo in itertools.combinations(ids, r):
            if _is_one_vi(graph, combo):
                out.append(combo)
    return out


def uv_discriminant(n_edges: int, n_vertices: int, d: float) -> float:
    """Convergence discriminant |E| - (d/2)(|E| - |V| + 1) of a connected
    subgraph; positive on every irreducible subgraph means the graph
    integral is finite."""
    return n_edges - 0.5 * d * (n_edges - n_vertices + 1)


@dataclass(frozen=True)
class GraphIntegralResult:
    """Verdict plus (for convergent runs) the Monte Carlo estimate."""

    verdict: str
    value: float = float("nan")
    se: float = float("nan")
    bound: float = float("nan")
    witness: tuple[int, ...] | None = None
    witness_delta: float | None = None
    witness_profile: tuple[int, int] | None = None
    sectors: int = 0
    warning: str = ""

    def as_row(self) -> dict:
        return {
            "verdict": self.verdict,
            "value": self.value,
            "stderr": self.se,
            "bound": self.bound,
            "witness": "" if self.witness is None else "+".join(map(str, self.witness)),
        }


def _subgraph_profile(graph: Multigraph, edge_ids) -> tuple[int, int]:
    """(V2, V3): degree-2 and degree-3 vertex counts within the subgraph."""
    deg: dict[int, int] = {}
    for i in edge_ids:
        u, v = graph.edges[i]
        deg[u] = deg.get(u, 0) + (2 if u == v else 1)
        if u != v:
            deg[v] = deg.get(v, 0) + 1
    counts = list(deg.values())
    return counts.count(2), counts.count(3)


def singularity_scan(graph: Multigraph, d: float) -> GraphIntegralResult:
    """Scan all irreducible subgraphs; divergent when any discriminant <= 0.

    The witness is the divergent subgraph with fewest edges (ties broken by
    smaller discriminant, then lexicographic edge ids).
    """
    bad = []
    for sub in one_vi_subgraphs(graph):
        verts = {w for i in sub for w in graph.edges[i]}
        delta = uv_discriminant(len(sub), len(verts), d)
        if delta <= 1e-12:
            bad.append((len(sub), delta, sub))
    if not bad:
        return GraphIntegralResult(verdict="convergent")
    bad.sort(key=lambda t: (t[0], t[1], t[2]))
    _, delta, witness = bad[0]
    return GraphIntegralResult(
        verdict="divergent",
        witness=witness,
        witness_delta=delta,
        witness_profile=_subgraph_profile(graph, witness),
    )


def singular_pairs(d: float, v2_max: int = 8, v3_max: int = 8) -> list[tuple[int, int]]:
    """Raw (V2, V3) pairs with V2 + (3/2 - d/4) V3 - d/2 <= 0, (0,0) excluded."""
    out = []
    for v2 in range(v2_max + 1):
        for v3 in range(v3_max + 1):
            if (v2, v3) == (0, 0):
                continue
            if v2 + (1.5 - 0.25 * d) * v3 - 0.5 * d <= 1e-12:
                out.append((v2, v3))
    return out


_TABLE_SINGULAR = {
    1: (),
    2: ((1, 0), (0, 1)),
    3: ((1, 0), (0, 1), (0, 2)),
    4: ((1, 0), (1, 1), (2, 0), (0, 1), (0, 2), (0, 3), (0, 4)),
}

_TABLE_PATTERNS = {
    1: (),
    2: ("tadpole",),
    3: (),
    4: ((2, 0), (1, 2)),
    5: ((2, 2), (1, 4)),
}


def singular_table(d: int, v3_max: int = 10) -> list[tuple[int, int]]:
    """Published table of candidate singular (V2, V3) profiles per dimension.

    For d <= 4 the published lists are returned verbatim (the d = 4 row omits
    (1, 2) even though the raw criterion admits it; singular_pairs exposes the
    raw enumeration).  The d = 5 and d = 6 rows are published as rules and are
    expanded here: V2 + V3/4 <= 5/2, and V2 in {1, 2, 3} with even V3 capped
    at v3_max.
    """
    if d not in range(1, 7):
        raise ValueError("dimension must be 1..6")
    if d <= 4:
        return list(_TABLE_SINGULAR[d])
    if d == 5:
        return [
            (v2, v3)
            for v2 in range(3)
            for v3 in range(v3_max + 1)
            if (v2, v3) != (0, 0) and v2 + 0.25 * v3 <= 2.5
        ]
    return [(v2, v3) for v2 in (1, 2, 3) for v3 in range(0, v3_max + 1, 2)]


def singular_patterns(d: int):
    """Published extra singular patterns arising inside cubic diagrams."""
    if d not in _TABLE_PATTERNS:
        raise ValueError("patterns are tabulated for dimensions 1..5")
    return _TABLE_PATTERNS[d]


# ---------------------------------------------------------------------------
# typical diagrams


@dataclass(frozen=True)
class Diagram:
    """Multigraph plus ordered circuits, stored as edge-id step sequences."""

    graph: Multigraph
    circuits: tuple[tuple[int, ...], ...]
    circuit_vertices: tuple[tuple[int, ...], ...]
    beta: int

    @property
    def k(self) -> int:
        return len(self.circuits)

    @property
    def s(self) -> int:
        return self.graph.n_vertices // 2

    @property
    def marked(self) -> tuple[int, ...]:
        return tuple(c[0] for c in self.circuit_vertices)

    @property
    def tail_edges(self) -> tuple[int, ...]:
        return tuple(c[0] for c in self.circuits)

    def multiplicities(self) -> np.ndarray:
        """c_i(e): occurrences of edge e in circuit i, shape (k, n_edges)."""
        out = np.zeros((self.k, self.graph.n_edges), dtype=int)
        for i, circ in enumerate(self.circuits):
            for e in circ:
                out[i, e] += 1
        return out

    def as_dict(self) -> dict:
        return {
            "beta": self.beta,
            "s": self.s,
            "edges": [list(e) for e in self.graph.edges],
            "circuits": [list(c) for c in self.circuit_vertices],
            "multiplicities": self.multiplicities().tolist(),
        }


def catalog_json(diagrams) -> str:
    """JSON export of a diagram list (edge lists, circuits, multiplicities)."""
    return json.dumps([d.as_dict() for d in diagrams], indent=1)


def _degree_graphs(k: int, s: int) -> list[Multigraph]:
    """Connected multigraphs with k degree-1 vertices (ids 0..k-1) and
    2s - k degree-3 vertices, deduplicated up to color-preserving
    relabeling."""
    n = 2 * s
    target = [1] * k + [3] * (n - k)
    found: list[tuple] = []

    def fill(u: int, residual: list[int], rows: dict):
        if u == n:
            if all(r == 0 for r in residual):
                found.append(tuple(sorted(rows.items())))
            return
        slots = [(u, v) for v in range(u + 1, n)]
        if u >= k:
            slots = [(u, u)] + slots

        def place(idx: int, left: int):
            if left == 0:
                if sum(residual[v] for v in range(u + 1, n)) % 2 == 0:
                    fill(u + 1, residual, rows)
                return
            if idx == len(slots):
                return
            a, b = slots[idx]
            if a == b:
                if left >= 2:
                    rows[(a, b)] = 1
                    residual[a] -= 2
                    place(idx + 1, left - 2)
                    residual[a] += 2
                    del rows[(a, b)]
                place(idx + 1, left)
            else:
                cap = min(left, residual[b], 3)
                for m in range(cap, 0, -1):
                    rows[(a, b)] = m
                    residual[a] -= m
                    residual[b] -= m
                    place(idx + 1, left - m)
                    residual[a] += m
                    residual[b] += m
                    del rows[(a, b)]
                place(idx + 1, left)

        place(0, residual[u])

    fill(0, list(target), {})

    perms = [
        dict(enumerate(list(pm) + list(pi)))
        for pm in itertools.permutations(range(k))
        for pi in itertools.permutations(range(k, n))
    ]
    seen = set()
    graphs = []
    for rows in found:
        edges = []
        for (u, v), m in rows:
            edges.extend([(u, v)] * m)
        g = Multigraph(n, tuple(edges))
        if not g.is_connected():
            continue
        key = min(
            tuple(sorted((min(p[u], p[v]), max(p[u], p[v])) for u, v in g.edges))
            for p in perms
        )
        if key in seen:
            continue
        seen.add(key)
        graphs.append(Multigraph(n, key))
    return graphs


def _automorphisms(graph: Multigraph, k: int) -> list[dict]:
    """Color-preserving vertex permutations fixing the edge multiset."""
    n = graph.n_vertices
    base = tuple(sorted(graph.edges))
    auts = []
    for pm in itertools.permutations(range(k)):
        for pi in itertools.permutations(range(k, n)):
            p = dict(enumerate(list(pm) + list(pi)))
            img = tuple(sorted((min(p[u], p[v]), max(p[u], p[v])) for u, v in graph.edges))
            if img == base:
                auts.append(p)
    return auts


def _circuit_covers(graph: Multigraph, beta: int, k: int) -> list:
    """All circuit double-covers: ordered k-tuples of closed walks from the
    marked vertices spending every edge's traversal budget, with no immediate
    edge reversal (real self-loops exempt).  Complex samples budget non-loop
    edges once per direction; everything else carries a budget of two."""
    marked = list(range(k))
    deg = graph.degrees()
    if any(deg[m] != 1 for m in marked):
        return []
    incident: list[list[tuple[int, int]]] = [[] for _ in range(graph.n_vertices)]
    for i, (u, v) in enumerate(graph.edges):
        incident[u].append((i, v))
        if u != v:
            incident[v].append((i, u))
    is_loop = [u == v for u, v in graph.edges]
    budget: dict = {}
    for i, (u, v) in enumerate(graph.edges):
        if beta == 2 and u != v:
            budget[(i, 0)] = 1
            budget[(i, 1)] = 1
        else:
            budget[(i,)] = 2

    def dir_key(eid: int, frm: int):
        u, v = graph.edges[eid]
        if beta == 2 and u != v:
            return (eid, 0 if frm == u else 1)
        return (eid,)

    results: list = []
    state_circuits: list[tuple] = []
    state_verts: list[tuple] = []

    def dfs(slot, x, prev, steps, verts):
        if len(results) > _COVER_CAP:
            raise EnumerationBudgetError("circuit cover count exceeds the cap")
        if x == marked[slot] and steps:
            state_circuits.append(tuple(steps))
            state_verts.append(tuple(verts))
            if slot + 1 == k:
                if sum(len(c) for c in state_circuits) == 2 * graph.n_edges:
                    results.append((tuple(state_circuits), tuple(state_verts)))
            else:
                dfs(slot + 1, marked[slot + 1], None, [], [marked[slot + 1]])
            state_circuits.pop()
            state_verts.pop()
            return
        for eid, y in incident[x]:
            key = dir_key(eid, x)
            if budget[key] < 1:
                continue
            if prev is not None and prev[0] == eid:
                reverse = is_loop[eid] or (prev[1] == y and prev[2] == x)
                if reverse and not (beta == 1 and is_loop[eid]):
                    continue
            if y < k and y != marked[slot]:
                continue
            budget[key] -= 1
            steps.append(eid)
            verts.append(y)
            dfs(slot, y, (eid, x, y), steps, verts)
            steps.pop()
            verts.pop()
            budget[key] += 1

    dfs(0, marked[0], None, [], [marked[0]])
    return results


def _canonical_cover(graph: Multigraph, circuits, verts, auts) -> tuple:
    """Canonical key of a cover under graph automorphisms, with parallel
    edges relabeled by first use so edge identity within a parallel class
    carries no spurious distinction."""
    best = None
    for p in auts:
        relabel: dict[int, int] = {}
        used: dict[tuple[int, int], int] = {}
        key_circ = []
        for ci, circ in enumerate(circuits):
            seq = []
            vs = verts[ci]
            for j, eid in enumerate(circ):
                u, v = graph.edges[eid]
                img = (min(p[u], p[v]), max(p[u], p[v]))
                if eid not in relabel:
                    rank = used.get(img, 0)
                    used[img] = rank + 1
                    relabel[eid] = rank
                seq.append((p[vs[j]], p[vs[j + 1]], img, relabel[eid]))
            key_circ.append(tuple(seq))
        key = tuple(key_circ)
        if best is None or key < best:
            best = key
    return best


_enumeration_cache: dict = {}


def enumerate_typical(beta: int, k: int, s_max: int) -> list[Diagram]:
    """All connected diagrams with degree-1 marked and degree-3 internal
    vertices, up to isomorphism, for 2s vertices with s <= s_max."""
    if beta not in (1, 2):
        raise ValueError("beta must be 1 or 2")
    if k < 1:
        raise ValueError("need at least one circuit")
    if s_max > 4:
        raise EnumerationBudgetError("s_max above 4 exceeds the enumeration budget")
    key = (beta, k, s_max)
    if key in _enumeration_cache:
        return list(_enumeration_cache[key])
    out: list[Diagram] = []
    for s in range(k, s_max + 1):
        for graph in _degree_graphs(k, s):
            covers = _circuit_covers(graph, beta, k)
            if not covers:
                continue
            auts = _automorphisms(graph, k)
            seen = set()
            for circuits, verts in covers:
                ck = _canonical_cover(graph, circuits, verts, auts)
                if ck in seen:
                    continue
                seen.add(ck)
                out.append(Diagram(graph, circuits, verts, beta))
    _enumeration_cache[key] = list(out)
    return out


def envelope_constant(counts: dict) -> float:
    """Smallest C with (s/C)^(s+k-1)/(k-1)! <= D <= (Cs)^(s+k-1)/(k-1)! for
    every (beta, k, s) -> D in counts with D > 0."""
    c = 1.0
    for (_, k, s), dcount in counts.items():
        if dcount <= 0:
            continue
        scale = (dcount * math.factorial(k - 1)) ** (1.0 / (s + k - 1))
        c = max(c, scale / s, s / scale)
    return c


# ---------------------------------------------------------------------------
# weight systems, counts, volumes, the count/volume constant


@dataclass(frozen=True)
class WeightSystem:
    """Linear constraints sum_e c_i(e) w_e = n_i with per-edge lower bounds."""

    coefficients: tuple[tuple[int, ...], ...]
    lower_bounds: tuple[int, ...]
    targets: tuple[int, ...]

    def __post_init__(self):
        m = len(self.lower_bounds)
        if any(len(row) != m for row in self.coefficients):
            raise ValueError("coefficient rows must match the variable count")
        if len(self.targets) != len(self.coefficients):
            raise ValueError("one target per constraint row")

    @property
    def n_vars(self) -> int:
        return len(self.lower_bounds)

    def scaled(self, factor: int) -> "WeightSystem":
        return replace(self, targets=tuple(int(factor * t) for t in self.targets))

    def residual_targets(self) -> tuple[int, ...]:
        shift = [
            sum(c * lb for c, lb in zip(row, self.lower_bounds)) for row in self.coefficients
        ]
        return tuple(t - sh for t, sh in zip(self.targets, shift))


def weight_system(diagram: Diagram, degrees, loop_min: int = 3) -> WeightSystem:
    """The diagram's linear weight system: tails >= 0, regular edges >= 1,
    self-loops >= loop_min."""
    if len(degrees) != diagram.k:
        raise ValueError("one degree per circuit")
    mult = diagram.multiplicities()
    tails = set(diagram.tail_edges)
    loops = set(diagram.graph.loops())
    lows = tuple(
        0 if e in tails else (loop_min if e in loops else 1)
        for e in range(diagram.graph.n_edges)
    )
    return WeightSystem(
        coefficients=tuple(tuple(int(x) for x in row) for row in mult),
        lower_bounds=lows,
        targets=tuple(int(n) for n in degrees),
    )


def count_solutions(system: WeightSystem) -> int:
    """Exact count of integer solutions of the weight system."""
    resid = system.residual_targets()
    if any(r < 0 for r in resid):
        return 0
    k = len(resid)
    cols = list(zip(*system.coefficients))
    if any(all(c == 0 for c in col) for col in cols):
        raise ValueError("a free variable makes the solution set infinite")
    if k == 1:
        n = resid[0]
        dp = [0] * (n + 1)
        dp[0] = 1
        for (c,) in cols:
            for j in range(c, n + 1):
                dp[j] += dp[j - c]
        return dp[n]
    # order coupling-heavy columns first to keep the reachable state set thin
    order = sorted(range(len(cols)), key=lambda i: -sum(1 for c in cols[i] if c))
    states = {resid: 1}
    for idx in order:
        col = cols[idx]
        new: dict = {}
        for res, cnt in states.items():
            wmax = min(res[i] // c for i, c in enumerate(col) if c)
            for w in range(wmax + 1):
                nxt = tuple(r - w * c for r, c in zip(res, col))
                new[nxt] = new.get(nxt, 0) + cnt
            if len(new) > _STATE_CAP:
                raise EnumerationBudgetError("weight-count state space exceeds the cap")
        states = new
    return states.get((0,) * k, 0)


def _polytope_vertices(system: WeightSystem) -> np.ndarray:
    """Vertices of {w >= lb : C w = targets} by basic feasible solutions."""
    C = np.asarray(system.coefficients, dtype=float)
    lb = np.asarray(system.lower_bounds, dtype=float)
    t = np.asarray(system.targets, dtype=float) - C @ lb
    _, m = C.shape
    rank = int(np.linalg.matrix_rank(C))
    verts = []
    for cols in itertools.combinations(range(m), rank):
        sub = C[:, cols]
        if np.linalg.matrix_rank(sub) < rank:
            continue
        sol, *_ = np.linalg.lstsq(sub, t, rcond=None)
        if np.max(np.abs(sub @ sol - t)) > 1e-8 * (1 + np.max(np.abs(t))):
            continue
        if sol.size and np.min(sol) < -1e-9:
            continue
        w = np.zeros(m)
        w[list(cols)] = sol
        verts.append(w + lb)
    if not verts:
        return np.zeros((0, m))
    arr = np.array(verts)
    _, idx = np.unique(np.round(arr, 9), axis=0, return_index=True)
    return arr[sorted(idx)]


def solution_volume(system: WeightSystem, mc_samples: int = 0, seed: int = 0) -> float:
    """Codimension-k surface volume of the real solution polytope.

    One constraint row uses the exact simplex formula; small systems take the
    convex hull of the vertex set in orthonormal null-space coordinates
    (which preserve the surface measure); larger systems fall back to
    hit-or-miss Monte Carlo in those coordinates when mc_samples is set.
    """
    C = np.asarray(system.coefficients, dtype=float)
    k, m = C.shape
    if any(np.all(C[:, e] == 0) for e in range(m)):
        raise ValueError("a free variable makes the polytope unbounded")
    resid = system.residual_targets()
    if any(r < 0 for r in resid):
        return 0.0
    if k == 1:
        row = C[0]
        n = float(resid[0])
        norm = float(np.linalg.norm(row))
        prod = float(np.prod(row))
        return n ** (m - 1) * norm / (math.factorial(m - 1) * prod)
    verts = _polytope_vertices(system)
    if len(verts) == 0:
        return 0.0
    _, sing, vt = np.linalg.svd(C)
    rank = int(np.sum(sing > 1e-10 * sing[0]))
    basis = vt[rank:].T
    dim = basis.shape[1]
    y = (verts - verts[0]) @ basis
    if dim == 0:
        return 0.0
    if dim == 1:
        return float(np.ptp(y[:, 0]))
    if m <= 6 or mc_samples == 0:
        from scipy.spatial import ConvexHull

        hull = ConvexHull(y, qhull_options="QJ")
        return float(hull.volume)
    rng = np.random.default_rng(np.random.Philox(key=(seed, 0)))
    lo, hi = y.min(axis=0), y.max(axis=0)
    pts = rng.uniform(lo, hi, size=(mc_samples, dim))
    w = verts[0] + pts @ basis.T
    lbs = np.asarray(system.lower_bounds, dtype=float)
    hits = np.all(w >= lbs - 1e-12, axis=1)
    return float(np.prod(hi - lo)) * float(np.mean(hits))


@dataclass(frozen=True)
class CountVolumeTrend:
    """count/volume ratios along a scale list and the extrapolated limit."""

    scales: tuple[int, ...]
    ratios: tuple[float, ...]
    limit: float


def c_constant(system: WeightSystem, scale_list) -> CountVolumeTrend:
    """Ratio of integer solution counts to polytope volume at growing scales.

    Targets are multiplied by each integer factor in scale_list; the limit is
    the ratio at the largest scale.
    """
    scales = tuple(int(s) for s in scale_list)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError("scales must be positive integers")
    ratios = []
    for s in sorted(scales):
        scaled = system.scaled(s)
        cnt = count_solutions(scaled)
        vol = solution_volume(scaled)
        if vol <= 0:
            raise ValueError("weight system is infeasible or degenerate at the tested scale")
        ratios.append(cnt / vol)
    if ratios[-1] == 0:
        raise ValueError("weight system has no integer solutions at the largest scale")
    return CountVolumeTrend(tuple(sorted(scales)), tuple(ratios), ratios[-1])


# ---------------------------------------------------------------------------
# graph integrals


def sector_bound(graph: Multigraph, delta: float = 0.01) -> float:
    """Analytic bound 18^|E| delta^-(|E|-|V|+1) on the convergent integral."""
    rank = graph.n_edges - graph.n_vertices + 1
    return 18.0**graph.n_edges * delta ** (-rank)


def _mst_sector(graph: Multigraph, alpha: np.ndarray) -> tuple[int, ...]:
    """Minimal spanning tree edge ids under the sampled alpha weights."""
    order = np.argsort(alpha)
    parent = list(range(graph.n_vertices))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = []
    for eid in order:
        u, v = graph.edges[int(eid)]
        if u == v:
            continue
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            tree.append(int(eid))
    return tuple(sorted(tree))


def graph_integral(
    graph: Multigraph,
    d: float,
    mc_samples: int = 20000,
    seed: int = 0,
    force: bool = False,
    threads: int = 1,
    delta: float = 0.01,
) -> GraphIntegralResult:
    """Monte Carlo estimate of the unit-box integral of U^(-d/2).

    Importance sampling draws each alpha_e with density proportional to
    alpha^-q, q = min(d/2, 0.9), which keeps the weight finite across the
    spanning-tree-complement singularities of convergent graphs; below two
    dimensions the product of alpha^(-d/2) over the complement of a sampled
    minimal spanning tree has the known box mean (1 - d/2)^-rank and serves
    as a regression control variate.  Divergent graphs are rejected unless
    force is set, in which case the running (non-convergent) estimate is
    returned with a warning.  The analytic sector bound is attached, and the
    number of distinct minimal-spanning-tree sectors seen is reported as a
    coverage diagnostic.  Work is split into fixed-size shards with one
    counter-mode stream each, so the estimate is independent of threads.
    """
    scan = singularity_scan(graph, d)
    bound = sector_bound(graph, delta)
    if scan.verdict == "divergent" and not force:
        return replace(scan, bound=bound)
    monomials = symanzik(graph)
    if len(monomials) == 1 and monomials[0] == ():
        return replace(scan, value=1.0, se=0.0, bound=bound, sectors=1)
    if mc_samples < 2:
        raise ValueError("need at least two samples")
    q = min(0.5 * d, 0.9)
    m = graph.n_edges
    rank = m - graph.n_vertices + 1

    def shard(args):
        idx, count = args
        rng = np.random.default_rng(np.random.Philox(key=(seed, idx)))
        u = rng.random(size=(count, m))
        alpha = u ** (1.0 / (1.0 - q))
        dens = (1.0 - q) ** m * np.prod(alpha**(-q), axis=1)
        w = symanzik_value(monomials, alpha) ** (-0.5 * d) / dens
        tree0 = _mst_sector(graph, alpha[0])
        comp0 = [e for e in range(m) if e not in tree0]
        cv = np.prod(alpha[:, comp0] ** (-0.5 * d), axis=1) / dens if comp0 else None
        sectors = {_mst_sector(graph, a) for a in alpha[: min(count, 256)]}
        return w, cv, sectors

    chunk = 8192
    jobs = [(i, min(chunk, mc_samples - i * chunk)) for i in range((mc_samples + chunk - 1) // chunk)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            parts = list(pool.map(shard, jobs))
    else:
        parts = [shard(job) for job in jobs]
    w = np.concatenate([p[0] for p in parts])
    sectors = set().union(*(p[2] for p in parts))
    cv_parts = [p[1] for p in parts]
    if d < 2 and rank >= 1 and all(c is not None for c in cv_parts):
        cv = np.concatenate(cv_parts)
        cv_true = (1.0 - 0.5 * d) ** (-rank)
        var_cv = float(np.var(cv))
        if var_cv > 0:
            coef = float(np.cov(w, cv)[0, 1] / var_cv)
            w = w - coef * (cv - cv_true)
    value = float(np.mean(w))
    se = float(np.std(w, ddof=1) / math.sqrt(len(w)))
    warning = ""
    if scan.verdict == "divergent":
        warning = "divergent by the singularity scan; the estimate does not converge"
    return replace(scan, value=value, se=se, bound=bound, sectors=len(sectors), warning=warning)


# ---------------------------------------------------------------------------
# diagram functions


def _cycle_basis(graph: Multigraph) -> np.ndarray:
    """Signed edge/cycle incidence B with k_e = sum_b B[e, b] m_b under the
    stored (u, v) edge orientation; bridges get zero rows, self-loops their
    own basis column."""
    n, m = graph.n_vertices, graph.n_edges
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for i, (u, v) in enumerate(graph.edges):
        if u != v:
            adj[u].append((i, v))
            adj[v].append((i, u))
    parent: dict[int, tuple] = {0: (None, None)}
    order = [0]
    tree_edges: set[int] = set()
    qi = 0
    while qi < len(order):
        x = order[qi]
        qi += 1
        for eid, y in adj[x]:
            if y not in parent:
                parent[y] = (x, eid)
                tree_edges.add(eid)
                order.append(y)
    if len(parent) != n:
        raise ValueError("cycle basis requires a connected graph")
    non_tree = [
        e for e in range(m) if e not in tree_edges and graph.edges[e][0] != graph.edges[e][1]
    ]
    loop_ids = [e for e in range(m) if graph.edges[e][0] == graph.edges[e][1]]
    B = np.zeros((m, len(non_tree) + len(loop_ids)), dtype=int)

    def path_up(x):
        out = []
        while parent[x][0] is not None:
            px, eid = parent[x]
            out.append((x, px, eid))
            x = px
        return out

    for b, eid in enumerate(non_tree):
        u, v = graph.edges[eid]
        B[eid, b] = 1  # traversed u -> v along its stored orientation
        pu = path_up(u)
        pv = path_up(v)
        while pu and pv and pu[-1][2] == pv[-1][2]:
            pu.pop()
            pv.pop()
        # close the cycle v -> ... -> meet -> ... -> u through the tree
        for x0, px, te in pv:
            a, c = graph.edges[te]
            B[te, b] += 1 if (x0, px) == (a, c) else -1
        for x0, px, te in pu:
            a, c = graph.edges[te]
            B[te, b] += 1 if (px, x0) == (a, c) else -1
    for j, eid in enumerate(loop_ids):
        B[eid, len(non_tree) + j] = 1
    return B


def _flow_lambdas(graph: Multigraph, lat: TorusLattice, flow_budget: int) -> np.ndarray:
    """Per-edge transfer eigenvalues on every momentum flow, shape
    (n_edges, n_flows)."""
    B = _cycle_basis(graph)
    rank = B.shape[1]
    L, d = lat.L, lat.d
    if rank and (L**d) ** rank > flow_budget:
        raise EnumerationBudgetError(
            f"{(L**d)**rank} momentum flows exceed the budget {flow_budget}"
        )
    if rank == 0:
        return np.ones((graph.n_edges, 1))
    lam_grid = fourier_profile(lat)
    mesh = np.meshgrid(*([np.arange(L)] * (d * rank)), indexing="ij")
    m_flat = np.stack([ax.reshape(-1) for ax in mesh])  # (d*rank, n_flows)
    lam = np.empty((graph.n_edges, m_flat.shape[1]))
    for e in range(graph.n_edges):
        k_e = np.zeros((d, m_flat.shape[1]), dtype=int)
        for b in range(rank):
            if B[e, b]:
                k_e += B[e, b] * m_flat[b * d : (b + 1) * d]
        lam[e] = lam_grid[tuple(k_e % L)]
    return lam


def _weight_generating_sum(system: WeightSystem, lam: np.ndarray) -> np.ndarray:
    """sum over admissible integer weights of prod_e lam_e^(w_e), vectorized
    over flow columns by dynamic programming on the residual targets."""
    resid = system.residual_targets()
    if any(r < 0 for r in resid):
        return np.zeros(lam.shape[1])
    F = lam.shape[1]
    lb_factor = np.ones(F)
    for e in range(system.n_vars):
        if system.lower_bounds[e]:
            lb_factor = lb_factor * lam[e] ** system.lower_bounds[e]
    k = len(resid)
    if k == 1:
        r = resid[0]
        if any(c == 0 for c in system.coefficients[0]):
            raise ValueError("every edge must appear in the single circuit")
        # chunk the flow axis so the DP table stays within a fixed budget
        block = max(1, _DP_MEM // (8 * (r + 1)))
        out = np.empty(F)
        for lo in range(0, F, block):
            sub = lam[:, lo:lo + block]
            dp = np.zeros((r + 1, sub.shape[1]))
            dp[0] = 1.0
            for e in range(system.n_vars):
                c = system.coefficients[0][e]
                for j in range(c, r + 1):
                    dp[j] += sub[e] * dp[j - c]
            out[lo:lo + block] = dp[r]
        return out * lb_factor
    cols = list(zip(*system.coefficients))
    order = sorted(range(len(cols)), key=lambda i: -sum(1 for c in cols[i] if c))
    states: dict[tuple, np.ndarray] = {resid: np.ones(F)}
    for idx in order:
        col = cols[idx]
        if all(c == 0 for c in col):
            raise ValueError("a free variable makes the weight sum infinite")
        new: dict[tuple, np.ndarray] = {}
        for res, vec in states.items():
            wmax = min(res[i] // c for i, c in enumerate(col) if c)
            acc = vec
            for w in range(wmax + 1):
                nxt = tuple(r - w * c for r, c in zip(res, col))
                cur = new.get(nxt)
                new[nxt] = acc if cur is None else cur + acc
                if w < wmax:
                    acc = acc * lam[idx]
            if len(new) * F > _STATE_CAP:
                raise EnumerationBudgetError("weight generating DP exceeds the state cap")
        states = new
    vec = states.get((0,) * k)
    return (vec if vec is not None else np.zeros(F)) * lb_factor


def diagram_function(
    diagram: Diagram,
    degrees,
    lat: TorusLattice,
    mode: str = "exact_sum",
    regime: str | None = None,
    loop_min: int = 3,
    mc_samples: int = 4000,
    seed: int = 0,
    flow_budget: int = _FLOW_CAP,
) -> ValueWithError:
    """Diagram function: the weight-constrained sum over torus embeddings of
    products of w-step transition kernels, divided by the site count.

    mode="exact_sum" contracts the embeddings in momentum space: summing the
    vertex positions leaves one conserved momentum per independent cycle, so
    the value is N^(|V|-1-|E|) times the flow sum of the weight generating
    function; this is exact for every lattice size.  mode="asymptotic"
    returns the declared-regime limit formula built from the count/volume
    constant and polytope volumes (supercritical), surface integrals of
    U^(-d/2) (subcritical), or torus heat-kernel integrals (critical).
    """
    degrees = tuple(int(x) for x in degrees)
    system = weight_system(diagram, degrees, loop_min=loop_min)
    if sum(degrees) % 2:
        return ValueWithError(0.0, 0.0)
    n_e, n_v = diagram.graph.n_edges, diagram.graph.n_vertices
    if mode == "exact_sum":
        lam = _flow_lambdas(diagram.graph, lat, flow_budget)
        gen = _weight_generating_sum(system, lam)
        return ValueWithError(float(lat.n_sites ** (n_v - 1 - n_e) * gen.sum()), 0.0)
    if mode != "asymptotic":
        raise ValueError(f"unknown mode {mode!r}")
    if regime is None:
        regime = classify_regime(lat, max(degrees))
    scan = singularity_scan(diagram.graph, lat.d)
    if scan.verdict == "divergent":
        raise ValueError(f"diagram is singular at d={lat.d}; witness edges {scan.witness}")
    k = diagram.k
    s = diagram.s
    rank = n_e - n_v + 1
    N = float(lat.n_sites)
    ref = max(2, int(math.ceil(2000 / max(1, min(degrees)))))
    ref += ref % 2
    cd = c_constant(system, [ref]).limit
    if regime == "supercritical":
        vol_tau = solution_volume(system) * N ** (-(n_e - k) / 3.0)
        return ValueWithError(cd * vol_tau * N ** (k / 3.0 - 1.0), 0.0)
    if regime == "subcritical":
        sig = np.atleast_2d(np.asarray(lat.sigma_cov, dtype=float))
        det = float(np.linalg.det(lat.W**2 * sig))
        pref = (2 * np.pi) ** (-0.5 * lat.d * rank) * det ** (0.5 * (k - s - 1))
        integral = _polytope_surface_integral(diagram, system, lat.d, mc_samples, seed)
        return ValueWithError(pref * cd * integral.value, pref * cd * integral.se)
    if regime == "critical":
        tau = [n * (lat.W / lat.L) ** 2 for n in degrees]
        inner = _theta_polytope_integral(diagram, tau, lat.sigma_cov, lat.d, mc_samples, seed)
        pref = cd * (lat.L / lat.W) ** (2 * (n_e - k)) * N ** (-rank)
        return ValueWithError(pref * inner.value, pref * inner.se)
    raise ValueError(f"unknown regime {regime!r}")


def _polytope_surface_integral(
    diagram: Diagram,
    system: WeightSystem,
    d: float,
    mc_samples: int,
    seed: int,
) -> ValueWithError:
    """Surface integral of U^(-d/2) over the equality polytope in weight
    units (single-circuit systems), by uniform simplex sampling."""
    if diagram.k != 1:
        raise ValueError("subcritical asymptotics cover single-circuit diagrams")
    resid = float(system.residual_targets()[0])
    vol = solution_volume(system)
    if vol <= 0 or resid <= 0:
        return ValueWithError(0.0, 0.0)
    row = np.asarray(system.coefficients[0], dtype=float)
    monomials = symanzik(diagram.graph)
    rng = np.random.default_rng(np.random.Philox(key=(seed, 1)))
    u = rng.exponential(size=(mc_samples, system.n_vars))
    u /= u.sum(axis=1, keepdims=True)
    alpha = resid * u / row[None, :] + np.asarray(system.lower_bounds, dtype=float)
    vals = symanzik_value(monomials, alpha) ** (-0.5 * d)
    return ValueWithError(
        vol * float(np.mean(vals)),
        vol * float(np.std(vals, ddof=1) / math.sqrt(mc_samples)),
    )


def _nontail_subgraph(diagram: Diagram) -> tuple[Multigraph, list[int]]:
    """Graph with tail edges and marked vertices removed, plus the surviving
    original edge ids in order."""
    tails = set(diagram.tail_edges)
    marked = set(diagram.marked)
    keep = [e for e in range(diagram.graph.n_edges) if e not in tails]
    verts = sorted(set(range(diagram.graph.n_vertices)) - marked)
    vmap = {v: i for i, v in enumerate(verts)}
    edges = tuple(
        (vmap[diagram.graph.edges[e][0]], vmap[diagram.graph.edges[e][1]]) for e in keep
    )
    return Multigraph(len(verts), edges), keep


def _theta_polytope_integral(
    diagram: Diagram,
    tau,
    sigma_cov,
    d: int,
    mc_samples: int,
    seed: int,
) -> ValueWithError:
    """Torus heat-kernel product integrated over the tail-reduced inequality
    polytope, position integrals contracted to one lattice Gaussian sum per
    independent cycle.

    The tail-elimination surface Jacobian sqrt(1 + sum (c_e/c_tail)^2) is
    included so the equality-surface count/volume constant applies verbatim;
    for single-circuit diagrams the constant times the Jacobian is exactly
    one.
    """
    if diagram.k != 1:
        raise ValueError("critical integrals cover single-circuit diagrams")
    sub, keep = _nontail_subgraph(diagram)
    mult = diagram.multiplicities()[0]
    c = np.array([mult[e] for e in keep], dtype=float)
    c_tail = float(mult[diagram.tail_edges[0]])
    t = float(tau[0])
    m = len(keep)
    jac = math.sqrt(1.0 + float(np.sum((c / c_tail) ** 2)))
    B = _cycle_basis(sub)
    rank = B.shape[1]
    sig = np.atleast_2d(np.asarray(sigma_cov, dtype=float))
    rng = np.random.default_rng(np.random.Philox(key=(seed, 2)))
    u = rng.exponential(size=(mc_samples, m + 1))
    u /= u.sum(axis=1, keepdims=True)
    alpha = t * u[:, :m] / c[None, :]
    vol = t**m / (math.factorial(m) * float(np.prod(c)))
    D = rank * d
    if D == 0:
        vals = np.ones(mc_samples)
    else:
        vals = np.empty(mc_samples)
        zero = np.zeros(D)
        for j in range(mc_samples):
            M = np.zeros((D, D))
            for e in range(m):
                if np.any(B[e]):
                    M += alpha[j, e] * np.kron(np.outer(B[e], B[e]), sig)
            vals[j] = theta(zero, M, d=D)
    return ValueWithError(
        jac * vol * float(np.mean(vals)),
        jac * vol * float(np.std(vals, ddof=1) / math.sqrt(mc_samples)),
    )


# ---------------------------------------------------------------------------
# tadpole partial sums


def tadpole_sum(d: int, W: float, n: int) -> float:
    """Partial sum W^-d sum_{m=3..n} m^(-d/2) of the self-loop weight series."""
    if n < 3:
        return 0.0
    m = np.arange(3, n + 1, dtype=float)
    return float(W ** (-d) * np.sum(m ** (-0.5 * d)))


def tadpole_exponent(d: int, W: float, n_grid) -> dict:
    """Growth diagnostics of the tadpole partial sum along a grid.

    slope is the increment-ratio exponent log2((S(4n)-S(2n))/(S(2n)-S(n)))
    at the largest grid point, which is 0 exactly for logarithmic growth and
    p for n^p growth; log_r2 is the R^2 of S against a + b log n."""
    ns = sorted(int(x) for x in n_grid)
    if len(ns) < 3:
        raise ValueError("need at least three grid points")
    s_vals = np.array([tadpole_sum(d, W, x) for x in ns])
    n_top = ns[-1]
    s1, s2, s4 = (tadpole_sum(d, W, f * n_top) for f in (1, 2, 4))
    slope = math.log2((s4 - s2) / (s2 - s1)) if s2 > s1 and s4 > s2 else float("nan")
    logs = np.log(np.asarray(ns, dtype=float))
    design = np.stack([np.ones_like(logs), logs], axis=1)
    coef, *_ = np.linalg.lstsq(design, s_vals, rcond=None)
    ss_res = float(np.sum((s_vals - design @ coef) ** 2))
    ss_tot = float(np.sum((s_vals - s_vals.mean()) ** 2))
    return {
        "slope": slope,
        "log_r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        "range_ratio": float(s_vals[-1] / s_vals[0]) if s_vals[0] else float("inf"),
    }


# ---------------------------------------------------------------------------
# cluster sums and limit transforms


def cluster_T(
    beta: int,
    degrees,
    s_max: int,
    lat: TorusLattice,
    mode: str = "exact_sum",
    regime: str | None = None,
    loop_min: int = 3,
    mc_samples: int = 4000,
    seed: int = 0,
    flow_budget: int = _FLOW_CAP,
) -> dict:
    """Truncated connected-cluster prediction: N times the sum of diagram
    functions over the typical family, with a geometric tail estimate from
    the last two s-shells (reported, never asserted)."""
    degrees = tuple(int(x) for x in degrees)
    k = len(degrees)
    if sum(degrees) % 2:
        return {"value": 0.0, "se": 0.0, "per_s": {}, "tail": 0.0, "diagrams": 0}
    per_s: dict[int, float] = {}
    per_s_var: dict[int, float] = {}
    count = 0
    for dia in enumerate_typical(beta, k, s_max):
        est = diagram_function(
            dia,
            degrees,
            lat,
            mode=mode,
            regime=regime,
            loop_min=loop_min,
            mc_samples=mc_samples,
            seed=seed,
            flow_budget=flow_budget,
        )
        if est.value == 0.0 and est.se == 0.0:
            continue
        per_s[dia.s] = per_s.get(dia.s, 0.0) + est.value
        per_s_var[dia.s] = per_s_var.get(dia.s, 0.0) + est.se**2
        count += 1
    N = float(lat.n_sites)
    total = N * sum(per_s.values())
    tail = 0.0
    shells = sorted(per_s)
    if len(shells) >= 2:
        last, prev = per_s[shells[-1]], per_s[shells[-2]]
        if prev and last:
            r = abs(last) / abs(prev)
            tail = N * abs(last) * r / (1.0 - r) if r < 1 else float("inf")
    return {
        "value": total,
        "se": N * math.sqrt(sum(per_s_var.values())),
        "per_s": {s: N * v for s, v in per_s.items()},
        "tail": tail,
        "diagrams": count,
    }


def _transform_family(beta: int, d: int, s_max: int) -> list[Diagram]:
    """Single-circuit diagram family entering the limit transforms: self-loop
    diagrams are excluded for real samples above one dimension."""
    dias = enumerate_typical(beta, 1, s_max)
    if beta == 1 and d >= 2:
        dias = [dia for dia in dias if not dia.graph.loops()]
    return dias


def transforms(beta: int, d: int, kind: str, params: dict) -> dict:
    """Limit-transform evaluations truncated at s_max.

    kind="sub": sum over the diagram family of the count/volume constant
    times tau^((3 - d/2)s - 3) times the unit-simplex surface integral of
    U^(-d/2) over all edges.  kind="crit": tau^-1 times the sum of the
    constant times gamma^(-6(s-1)) times the reduced-polytope heat-kernel
    integral.  Returns per-s terms, their standard errors, and the total.
    """
    if d >= 4:
        raise ValueError("transforms are defined below four dimensions")
    if kind not in ("sub", "crit"):
        raise ValueError(f"unknown transform kind {kind!r}")
    tau = float(params.get("tau", 1.0))
    s_max = int(params.get("s_max", 2))
    mc = int(params.get("mc", 4000))
    seed = int(params.get("seed", 0))
    gamma = float(params.get("gamma", 1.0))
    sigma_cov = np.atleast_2d(np.asarray(params.get("sigma", np.eye(d)), dtype=float))
    ref_scale = int(params.get("ref_scale", 1000))
    terms: dict[int, float] = {}
    term_var: dict[int, float] = {}
    for dia in _transform_family(beta, d, s_max):
        cd = c_constant(weight_system(dia, (2,)), [ref_scale]).limit
        if kind == "sub":
            monomials = symanzik(dia.graph)
            m = dia.graph.n_edges
            rng = np.random.default_rng(np.random.Philox(key=(seed, dia.s)))
            u = rng.exponential(size=(mc, m))
            u /= u.sum(axis=1, keepdims=True)
            vals = symanzik_value(monomials, u) ** (-0.5 * d)
            surf = math.sqrt(m) / math.factorial(m - 1)
            weight = cd * tau ** ((3.0 - 0.5 * d) * dia.s - 3.0)
            terms[dia.s] = terms.get(dia.s, 0.0) + weight * surf * float(np.mean(vals))
            err = weight * surf * float(np.std(vals, ddof=1) / math.sqrt(mc))
            term_var[dia.s] = term_var.get(dia.s, 0.0) + err**2
        else:
            inner = _theta_polytope_integral(dia, [tau], sigma_cov, d, mc, seed + dia.s)
            weight = cd * gamma ** (-6.0 * (dia.s - 1)) / tau
            terms[dia.s] = terms.get(dia.s, 0.0) + weight * inner.value
            term_var[dia.s] = term_var.get(dia.s, 0.0) + (weight * inner.se) ** 2
    term_se = {s: math.sqrt(v) for s, v in term_var.items()}
    return {
        "terms": terms,
        "term_se": term_se,
        "total": sum(terms.values()),
        "se": math.sqrt(sum(term_var.values())),
    }
