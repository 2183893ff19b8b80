"""Random walk kernels on the d-dimensional discrete torus.

The walk lives on Lambda = [-L/2, L/2)^d intersected with Z^d (N = L^d sites)
and takes steps with a wrapped Gaussian profile of width W and shape Sigma
(a d x d SPD covariance).  Everything here reduces to the lattice theta
function

    theta(x, S) = (2 pi)^{-d/2} det(S)^{-1/2} sum_{n in Z^d} exp(-(n+x)' S^{-1} (n+x) / 2)
                = sum_{k in Z^d} exp(-2 pi^2 k' S k) cos(2 pi k . x)

(the two lines are Poisson duals; the first converges fast for small S, the
second for large S) and to exact FFT powers of the one-step profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_EXPAND_STEP = 3
_MAX_RADIUS = 220
_CHUNK_BUDGET = 1 << 22


def _as_cov(S, d: int) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim == 0:
        S = S * np.eye(d)
    if S.shape != (d, d):
        raise ValueError(f"covariance must be ({d},{d}), got {S.shape}")
    if not np.allclose(S, S.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    return 0.5 * (S + S.T)


def _int_box(radius: int, d: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _theta_direct(x: np.ndarray, S: np.ndarray, rel_tol: float) -> np.ndarray:
    d = S.shape[0]
    evals = np.linalg.eigvalsh(S)
    if evals[0] <= 0:
        raise ValueError("covariance must be positive definite")
    Sinv = np.linalg.inv(S)
    norm = (2.0 * math.pi) ** (-d / 2.0) * float(np.linalg.det(S)) ** -0.5
    c = -math.log(rel_tol) + 8.0
    radius = int(math.ceil(math.sqrt(2.0 * evals[-1] * c) + 1.5))
    while True:
        box = _int_box(radius, d)
        chunk = max(1, _CHUNK_BUDGET // box.shape[0])
        total = np.empty(x.shape[0])
        shell = np.empty(x.shape[0])
        outer = np.abs(box).max(axis=1) == radius
        for lo in range(0, x.shape[0], chunk):
            y = box[None, :, :] + x[lo : lo + chunk, None, :]
            q = np.einsum("bmi,ij,bmj->bm", y, Sinv, y)
            w = np.exp(-0.5 * q)
            total[lo : lo + chunk] = w.sum(axis=1)
            shell[lo : lo + chunk] = w[:, outer].sum(axis=1)
        if radius >= _MAX_RADIUS or np.all(shell <= rel_tol * np.maximum(total, 1e-300)):
            return norm * total
        radius += _EXPAND_STEP


def _theta_dual(x: np.ndarray, S: np.ndarray, rel_tol: float) -> np.ndarray:
    d = S.shape[0]
    evals = np.linalg.eigvalsh(S)
    if evals[0] <= 0:
        raise ValueError("covariance must be positive definite")
    c = -math.log(rel_tol) + 8.0
    radius = int(math.ceil(math.sqrt(c / (2.0 * math.pi**2 * evals[0])) + 1.5))
    while True:
        box = _int_box(radius, d)
        w = np.exp(-2.0 * math.pi**2 * np.einsum("mi,ij,mj->m", box, S, box))
        outer = np.abs(box).max(axis=1) == radius
        if radius >= _MAX_RADIUS or w[outer].sum() <= rel_tol * w.sum():
            break
        radius += _EXPAND_STEP
    chunk = max(1, _CHUNK_BUDGET // box.shape[0])
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        phase = np.cos(2.0 * math.pi * (x[lo : lo + chunk] @ box.T))
        out[lo : lo + chunk] = phase @ w
    return out


def theta(x, S, *, d: int | None = None, rel_tol: float = 1e-16) -> np.ndarray | float:
    """Lattice theta function theta(x, S) for x of shape (..., d).

    Chooses the direct wrapped-Gaussian sum when tr(S) < d and the Poisson
    dual otherwise; either sum is truncated by shells at relative weight
    rel_tol.  Scalar x is treated as one dimension.
    """
    x = np.asarray(x, dtype=float)
    if d is None:
        d = 1 if x.ndim == 0 else x.shape[-1]
    S = _as_cov(S, d)
    scalar_in = x.ndim == 0 or (x.ndim == 1 and d > 1)
    flat = x.reshape(-1, d) if x.ndim else x.reshape(1, 1)
    if x.ndim >= 1 and x.shape[-1] != d:
        raise ValueError("last axis of x must match the dimension")
    flat = flat - np.round(flat)  # theta is 1-periodic in each coordinate
    if np.trace(S) < d:
        vals = _theta_direct(flat, S, rel_tol)
    else:
        vals = _theta_dual(flat, S, rel_tol)
    if scalar_in:
        return float(vals[0])
    return vals.reshape(x.shape[:-1])


@dataclass(frozen=True)
class TorusLattice:
    """Torus geometry plus step profile parameters."""

    d: int
    L: int
    W: float
    sigma_cov: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.L < 2 or self.L % 2:
            raise ValueError("side length must be even and >= 2")
        if not (0 < self.W <= self.L / 2):
            raise ValueError("band width must satisfy 0 < W <= L/2")
        cov = _as_cov(self.sigma_cov if self.sigma_cov is not None else 1.0, self.d)
        if np.linalg.eigvalsh(cov)[0] <= 0:
            raise ValueError("step covariance must be positive definite")
        object.__setattr__(self, "sigma_cov", cov)

    @property
    def n_sites(self) -> int:
        return self.L**self.d

    @property
    def c_sigma(self) -> float:
        """Smallest eigenvalue of the step covariance."""
        return float(np.linalg.eigvalsh(self.sigma_cov)[0])

    def signed_offsets(self) -> np.ndarray:
        """Grid of signed displacements, shape (L,)*d + (d,)."""
        ax = (np.arange(self.L) + self.L // 2) % self.L - self.L // 2
        grids = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack(grids, axis=-1)


def mass_M(lat: TorusLattice) -> float:
    """Normalizing mass M = sum_{x in Z^d} f(x/W) = W^d theta(0, W^2 Sigma)."""
    return lat.W**lat.d * theta(np.zeros(lat.d), lat.W**2 * lat.sigma_cov, d=lat.d)


def profile_sigma2(lat: TorusLattice) -> np.ndarray:
    """One-step variance profile sigma^2(delta) on the full torus grid.

    sigma^2(delta) = (W^d / (M L^d)) theta(delta / L, (W/L)^2 Sigma); the grid
    is indexed like numpy FFT output (delta = 0 at index 0, wrapping).
    """
    M = mass_M(lat)
    x = lat.signed_offsets().reshape(-1, lat.d) / lat.L
    S = (lat.W / lat.L) ** 2 * lat.sigma_cov
    vals = theta(x, S, d=lat.d) * (lat.W**lat.d / (M * lat.n_sites))
    return vals.reshape((lat.L,) * lat.d)


def fourier_profile(lat: TorusLattice) -> np.ndarray:
    """DFT of the one-step profile (real by symmetry)."""
    ph = np.fft.fftn(profile_sigma2(lat))
    return ph.real


def transition_n(lat: TorusLattice, n: int, method: str = "convolution") -> np.ndarray:
    """n-step transition kernel p_n(delta) on the full grid.

    method="convolution" is exact (FFT power of the one-step profile);
    method="theta" is the local-limit form p_n = theta(delta/L, n (W/L)^2 Sigma) / N.
    """
    if n < 0:
        raise ValueError("step count must be >= 0")
    shape = (lat.L,) * lat.d
    if n == 0:
        out = np.zeros(shape)
        out[(0,) * lat.d] = 1.0
        return out
    if method == "convolution":
        p = np.fft.ifftn(fourier_profile(lat) ** n).real
    elif method == "theta":
        x = lat.signed_offsets().reshape(-1, lat.d) / lat.L
        S = n * (lat.W / lat.L) ** 2 * lat.sigma_cov
        p = (theta(x, S, d=lat.d) / lat.n_sites).reshape(shape)
    else:
        raise ValueError(f"unknown method {method!r}")
    p = np.where(np.abs(p) < 1e-300, 0.0, p)
    return p


def kernel_value(arr: np.ndarray, delta) -> float:
    """Value of a grid kernel at a signed displacement."""
    delta = np.atleast_1d(np.asarray(delta, dtype=int))
    idx = tuple(delta % arr.shape[0])
    return float(arr[idx])


def heat_kernel_constant(lat: TorusLattice, n_list, c2: float = 0.4) -> float:
    """Smallest C1 with p_n(delta) <= C1 prod_i ((n W^2)^{-1/2} e^{-c2 delta_i^2/(n W^2)} + 1/L).

    Returns the max over n in n_list and delta of the ratio of the two sides.
    """
    offs = lat.signed_offsets()
    best = 0.0
    for n in n_list:
        p = transition_n(lat, n)
        scale = n * lat.W**2
        bound = np.ones_like(p)
        for i in range(lat.d):
            di = offs[..., i]
            bound *= scale**-0.5 * np.exp(-c2 * di**2 / scale) + 1.0 / lat.L
        best = max(best, float((p / bound).max()))
    return best


def vertex_split_ratio(lat: TorusLattice, n1: int, n2: int, n3: int, x1, x2, x3) -> float:
    """Ratio p_{n1}(x1-x3) p_{n2}(x2-x3) / sum_x p_{n1}(x1-x) p_{n2}(x2-x) p_{n3}(x-x3).

    The splitting bound says this ratio is O(1) whenever n1, n2 >= n3 >= 1.
    """
    x1 = np.atleast_1d(np.asarray(x1, int))
    x2 = np.atleast_1d(np.asarray(x2, int))
    x3 = np.atleast_1d(np.asarray(x3, int))
    p1 = transition_n(lat, n1)
    p2 = transition_n(lat, n2)
    p3 = transition_n(lat, n3)
    lhs = kernel_value(p1, x1 - x3) * kernel_value(p2, x2 - x3)
    # kernels are even in delta, so p(a - x) as an array over x is roll(p, a)
    ax = tuple(range(lat.d))
    a1 = np.roll(p1, shift=tuple(x1 % lat.L), axis=ax)
    a2 = np.roll(p2, shift=tuple(x2 % lat.L), axis=ax)
    a3 = np.roll(p3, shift=tuple(x3 % lat.L), axis=ax)
    rhs = float(np.sum(a1 * a2 * a3))
    return lhs / rhs


def intersection_expectation(
    lat: TorusLattice,
    n1: int,
    n2: int,
    endpoints=None,
    kind: str = "crossing",
) -> float:
    """Expected number of space intersections of conditioned walk bridges.

    kind="crossing": two independent bridges, lengths n1 and n2, with
    endpoints (x1, x2) and (x3, x4); counts pairs (i, j) of times whose
    positions coincide, summed over the common site.
    kind="self": one bridge of length n1 from x1 to x2; counts time pairs
    i < j at the same site.
    """
    if endpoints is None:
        endpoints = np.zeros((4, lat.d), dtype=int)
    endpoints = np.asarray(endpoints, dtype=int).reshape(-1, lat.d)
    kernels = [transition_n(lat, k) for k in range(max(n1, n2) + 1)]
    ax = tuple(range(lat.d))

    def bridge_occupation(n, a, b):
        # occ(x) = sum_{i=1..n} p_{n-i}(a - x) p_i(x - b) / p_n(a - b)
        pa = [np.roll(kernels[n - i], shift=tuple(a % lat.L), axis=ax) for i in range(1, n + 1)]
        pb = [np.roll(kernels[i], shift=tuple(b % lat.L), axis=ax) for i in range(1, n + 1)]
        occ = sum(u * v for u, v in zip(pa, pb))
        return occ / kernel_value(kernels[n], a - b)

    if kind == "crossing":
        x1, x2, x3, x4 = endpoints[0], endpoints[1], endpoints[2], endpoints[3]
        occ1 = bridge_occupation(n1, x1, x2)
        occ2 = bridge_occupation(n2, x3, x4)
        return float(np.sum(occ1 * occ2))
    if kind == "self":
        x1, x2 = endpoints[0], endpoints[1]
        pn = kernel_value(kernels[n1], x1 - x2)
        total = 0.0
        for k in range(1, n1):
            total += (n1 - k) * kernel_value(kernels[n1 - k], x1 - x2) * kernel_value(kernels[k], np.zeros(lat.d, int))
        return total / pn
    raise ValueError(f"unknown kind {kind!r}")


def intersection_envelope(lat: TorusLattice, n: int) -> float:
    """Scale n^2/N + (n^{3/2}/W, n log n / W^2, n / W^d) for d = 1, 2, > 2."""
    base = n**2 / lat.n_sites
    if lat.d == 1:
        return base + n**1.5 / lat.W
    if lat.d == 2:
        return base + n * math.log(max(n, 2)) / lat.W**2
    return base + n / lat.W**lat.d


def classify_regime(lat: TorusLattice, n: float) -> str:
    """Bucket n (W/L)^2 into subcritical (< 0.25), critical, supercritical (> 4)."""
    r = n * (lat.W / lat.L) ** 2
    if r < 0.25:
        return "subcritical"
    if r > 4.0:
        return "supercritical"
    return "critical"
