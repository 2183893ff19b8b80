"""Modified and renormalized Chebyshev recursions with their edge asymptotics.

The modified polynomial family follows the four-term recursion
P_n = z P_{n-1} - P_{n-2} + a4 P_{n-4}; the renormalized family further
subtracts sum_{l>=3} a_{2l} P_{n-2l}.  Equivalently the generating function
is 1 / (1 - z t + t^2 - a4 t^4 + sum_l a_{2l} t^{2l}), which is what the
contour evaluator integrates.  The asymptotic helpers cover the three
regimes: a plain rescaled Chebyshev limit, a supercritical rescaling by
s = 1 - a4 + sum a_{2l}, and the subcritical oscillatory-integral limits
for d = 2, 3.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

_MAX_CONTOUR_POINTS = 1 << 18
_MAX_LOOP_ORDER = 200
_SINH_GUARD = 700.0

_FAMILIES = ("chebyshev_u", "modified_p", "renormalized_p")


@dataclass(frozen=True)
class PolyFamilySpec:
    """Which polynomial family to evaluate and its coefficients.

    chebyshev_u ignores a4/a2l; modified_p uses a4; renormalized_p uses a4
    plus the a_{2l} map truncated at l <= 3R (R = 0 means no truncation).
    """

    family: str = "modified_p"
    a4: float = 0.0
    a2l: dict = field(default_factory=dict)
    R: int = 0

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    def coefficients(self) -> tuple[float, dict]:
        if self.family == "chebyshev_u":
            return 0.0, {}
        if self.family == "modified_p":
            return self.a4, {}
        cut = 3 * self.R if self.R else None
        a2l = {l: c for l, c in _a2l_coeffs(self.a2l).items() if cut is None or l <= cut}
        return self.a4, a2l

    def trace(self, H: np.ndarray, n: int, **kw):
        a4, a2l = self.coefficients()
        return trace_poly(H, n, a4=a4, a2l=a2l, **kw)


def chebyshev_u(n, x):
    """Chebyshev polynomial of the second kind U_n(x)."""
    return special.eval_chebyu(n, x)


def _a2l_coeffs(a2l) -> dict:
    """Normalize a_{2l} input to {l: coefficient} with l >= 3."""
    if a2l is None:
        return {}
    if isinstance(a2l, dict):
        out = dict(a2l)
    else:
        out = {l + 3: c for l, c in enumerate(a2l)}
    for l in out:
        if l < 3:
            raise ValueError(f"a_{{2l}} terms start at l = 3, got l = {l}")
    return out


def asymptotic_a2l(d: int, W: float, l_max: int) -> dict:
    """Leading double-loop weights (2 pi l)^{-d/2} W^{-d} for l = 3..l_max."""
    return {l: (2.0 * math.pi * l) ** (-d / 2.0) * W**-d for l in range(3, l_max + 1)}


def eval_scalar(n: int, z, a4: float = 0.0, a2l=None, all_orders: bool = False):
    """P_n(z) (or the renormalized variant when a2l is given) at scalar or
    array argument z, by direct recursion."""
    coeffs = _a2l_coeffs(a2l)
    z = np.asarray(z)
    out = np.zeros((n + 1,) + z.shape, dtype=np.result_type(z, float))
    out[0] = 1.0
    if n >= 1:
        out[1] = z
    for k in range(2, n + 1):
        acc = z * out[k - 1] - out[k - 2]
        if k >= 4 and a4:
            acc = acc + a4 * out[k - 4]
        for l, c in coeffs.items():
            if k >= 2 * l:
                acc = acc - c * out[k - 2 * l]
        out[k] = acc
    if all_orders:
        return out
    return out[n]


def _apply_coef(c, P: np.ndarray) -> np.ndarray:
    """Multiply by a scalar coefficient or a diagonal one (1-d array)."""
    arr = np.asarray(c)
    if arr.ndim == 0:
        return arr * P
    if arr.ndim == 1:
        return arr[:, None] * P
    return arr @ P


def poly_matrix(H: np.ndarray, n: int, a4=0.0, a2l=None, all_orders: bool = False):
    """Matrix polynomial P_n(H); coefficients may be scalars or diagonals.

    A 1-d coefficient c acts as the diagonal matrix diag(c) from the left,
    which is the form the exact loop identities need when the double-loop
    weights are entry-dependent (beta = 2).
    """
    coeffs = _a2l_coeffs(a2l)
    N = H.shape[0]
    eye = np.eye(N, dtype=H.dtype)
    out = [eye]
    if n >= 1:
        out.append(H.copy())
    for k in range(2, n + 1):
        acc = H @ out[k - 1] - out[k - 2]
        if k >= 4:
            acc = acc + _apply_coef(a4, out[k - 4])
        for l, c in coeffs.items():
            if k >= 2 * l:
                acc = acc - _apply_coef(c, out[k - 2 * l])
        out.append(acc)
    if all_orders:
        return out
    return out[n]


def apply_to_vector(H, n: int, v: np.ndarray, a4: float = 0.0, a2l=None) -> np.ndarray:
    """P_n(H) v using matvecs only, with a rolling window of past vectors.

    H needs only a matmul with vectors (dense array or sparse operator).
    """
    coeffs = _a2l_coeffs(a2l)
    l_max = max(coeffs) if coeffs else 2
    if l_max > _MAX_LOOP_ORDER:
        raise ValueError(f"loop order {l_max} exceeds the cap {_MAX_LOOP_ORDER}")
    window = max(4, 2 * l_max) + 1
    past: deque = deque(maxlen=window)
    cur = np.asarray(v, dtype=np.result_type(H.dtype, v.dtype, float)).copy()
    past.append(cur)
    if n == 0:
        return cur
    cur = H @ cur
    past.append(cur)
    for k in range(2, n + 1):
        acc = H @ past[-1] - past[-2]
        if k >= 4 and a4:
            acc = acc + a4 * past[-4]
        for l, c in coeffs.items():
            if k >= 2 * l:
                acc = acc - c * past[-2 * l]
        past.append(acc)
    return past[-1]


def trace_poly(
    H: np.ndarray,
    n: int,
    a4: float = 0.0,
    a2l=None,
    mode: str = "exact",
    probes: int = 1,
    seed: int = 0,
    all_orders: bool = False,
):
    """Tr P_n(H), exactly through the spectrum or by Hutchinson probing.

    exact diagonalizes once and sums the scalar recursion over eigenvalues.
    hutchinson averages z^T P_n(H) z over Rademacher probes and returns
    (estimate, standard error); with all_orders the arrays cover 0..n.
    """
    if mode == "exact":
        lam = np.linalg.eigvalsh(H)
        vals = eval_scalar(n, lam, a4=a4, a2l=a2l, all_orders=all_orders)
        return vals.sum(axis=-1)
    if mode == "hutchinson":
        rng = np.random.Generator(np.random.Philox(key=seed))
        N = H.shape[0]
        ests = np.zeros((probes, n + 1) if all_orders else (probes,))
        for p in range(probes):
            zv = rng.integers(0, 2, size=N) * 2.0 - 1.0
            if all_orders:
                coeffs = _a2l_coeffs(a2l)
                vecs = [zv.copy()]
                if n >= 1:
                    vecs.append(H @ zv)
                for k in range(2, n + 1):
                    acc = H @ vecs[k - 1] - vecs[k - 2]
                    if k >= 4 and a4:
                        acc = acc + a4 * vecs[k - 4]
                    for l, c in coeffs.items():
                        if k >= 2 * l:
                            acc = acc - c * vecs[k - 2 * l]
                    vecs.append(acc)
                ests[p] = [float(np.real(zv @ w)) for w in vecs]
            else:
                w = apply_to_vector(H, n, zv, a4=a4, a2l=a2l)
                ests[p] = float(np.real(zv @ w))
        if probes == 1:
            return ests[0], np.zeros_like(ests[0])
        return ests.mean(axis=0), ests.std(axis=0, ddof=1) / math.sqrt(probes)
    raise ValueError(f"unknown mode {mode!r}")


def contour_eval(n: int, z: float, a4: float = 0.0, a2l=None, n_points: int | None = None) -> float:
    """P_n(z) as the t^n coefficient of the generating function.

    Trapezoid rule on a circle shrunk by 1 - 1/(2n) inside the smallest
    denominator zero (the zeros sit near |t| = 1/sqrt(s) and move inside
    the unit circle when s = 1 - a4 + sum a_{2l} > 1 or z > 2, so the
    radius is clamped to the actual root modulus).  The node count grows
    like 256 n because the aliasing error scales as (rho / r_min)^m.
    """
    if n < 1:
        return 1.0
    coeffs = _a2l_coeffs(a2l)
    if n_points is None:
        n_points = min(max(256 * n, 4096), _MAX_CONTOUR_POINTS)
    deg = max(2, 2 * max(coeffs, default=2), 4 if a4 else 2)
    poly = np.zeros(deg + 1)
    poly[0], poly[1], poly[2] = 1.0, -z, 1.0
    if a4:
        poly[4] = -a4
    for l, c in coeffs.items():
        poly[2 * l] += c
    r_min = float(np.min(np.abs(np.roots(poly[::-1]))))
    rho = min(1.0, r_min) * (1.0 - 1.0 / (2.0 * n))
    k = np.arange(n_points)
    t = rho * np.exp(2j * math.pi * k / n_points)
    den = 1.0 - z * t + t**2 - a4 * t**4
    for l, c in coeffs.items():
        den = den + c * t ** (2 * l)
    vals = 1.0 / den
    phase = np.exp(-2j * math.pi * k * (n % n_points) / n_points)
    return float(np.real(np.mean(vals * phase)) * rho**-n)


def rescaled_chebyshev(n: int, x, a4: float):
    """(1 - a4)^{n/2} U_n(x / sqrt(1 - a4)): the n << W^d limit shape."""
    s = 1.0 - a4
    return s ** (n / 2.0) * special.eval_chebyu(n, np.asarray(x) / math.sqrt(s))


def envelope_gap(n: int, x_grid, a4: float) -> float:
    """max over the grid of |P_n(2x) - rescaled Chebyshev| / n."""
    x = np.asarray(x_grid, dtype=float)
    exact = eval_scalar(n, 2.0 * x, a4=a4)
    return float(np.max(np.abs(exact - rescaled_chebyshev(n, x, a4))) / n)


def supercrit_asymptote(n: int, x, a4: float, a2l=None):
    """s^{n/2} U_n(x / sqrt(s)) with s = 1 - a4 + sum a_{2l}."""
    s = 1.0 - a4 + sum(_a2l_coeffs(a2l).values())
    return s ** (n / 2.0) * special.eval_chebyu(n, np.asarray(x) / math.sqrt(s))


def subcrit_spectral_param(x_hat: float, W: float, d: int) -> float:
    """Spectral argument x(x_hat, W) entering the subcritical limit."""
    if d == 2:
        return 1.0 + (-2.0 - math.log(2.0) + math.log(W)) / (4.0 * math.pi * W**2) - x_hat / (
            2.0 * W**2
        )
    if d == 3:
        c = (special.zeta(3.0 / 2.0, 1) - 1.0 - 1.0 / math.sqrt(2.0)) / (
            2.0 * (2.0 * math.pi) ** 1.5 * W**3
        )
        return 1.0 + c - x_hat / (2.0 * W**4)
    raise ValueError("subcritical transform is defined for d in {2, 3}")


def _subcrit_kernel(y: complex, d: int) -> complex:
    """Half-line kernel of the subcritical denominator, principal branch."""
    if d == 2:
        return np.log(y + 0j) / (2.0 * math.pi)
    return np.sqrt(y + 0j) / math.pi


def _rightmost_zero(x_hat: float, d: int) -> complex:
    """Rightmost zero of y^2 + x_hat - kernel(y), by damped fixed point."""
    y = complex(math.sqrt(-x_hat)) if x_hat < 0 else 1j * math.sqrt(max(x_hat, 0.25))
    y = y + 0.2 + 0.2j
    for _ in range(80):
        y_new = np.sqrt(complex(-x_hat + _subcrit_kernel(y, d)))
        y = 0.5 * y + 0.5 * complex(y_new)
    return y


def subcrit_limit_transform(x_hat: float, t: float, d: int) -> float:
    """The subcritical limit of P_n(2x)/n at rescaled edge distance x_hat.

    The limit is (1/t) times the inverse Laplace transform, at time t, of
    1 / (y^2 + x_hat - kernel(y)) with kernel log(y)/(2 pi) for d = 2 and
    sqrt(y)/pi for d = 3.  The Bromwich line Re y = c must pass right of
    both denominator zeros (the kernel pushes them off the imaginary axis,
    and for x_hat < 0 a real zero near sqrt(-x_hat) carries the growing
    mode), so c is placed from the located rightmost zero.
    """
    if d not in (2, 3):
        raise ValueError("subcritical transform is defined for d in {2, 3}")
    c = max(1.0, _rightmost_zero(x_hat, d).real + 0.75)

    def inv_den(v: float) -> complex:
        y = complex(c, v)
        return 1.0 / (y * y + x_hat - _subcrit_kernel(y, d))

    re, _ = integrate.quad(lambda v: inv_den(v).real, 0.0, np.inf, weight="cos", wvar=t)
    im, _ = integrate.quad(lambda v: inv_den(v).imag, 0.0, np.inf, weight="sin", wvar=t)
    return math.exp(t * c) * (re - im) / (math.pi * t)


def sinc_transform(points, x: float, j: int, weights=None, log: bool = False):
    """Moment transform int (sin(x sqrt(-lam)) / (x sqrt(-lam)))^{2j} d sigma.

    For lam > 0 the kernel continues to (sinh(x sqrt(lam)) / (x sqrt(lam)))^{2j};
    arguments past the overflow guard return inf (or the exact log value
    when log=True, which requires a single point mass).
    """
    if j not in (2, 4, 5):
        raise ValueError("transform is used with j in {2, 4, 5}")
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    w = np.ones_like(pts) if weights is None else np.asarray(weights, dtype=float)
    logs = np.empty_like(pts)
    for i, lam in enumerate(pts):
        u = x * math.sqrt(abs(lam))
        if lam == 0.0 or u == 0.0:
            logs[i] = 0.0
        elif lam < 0:
            # even power 2j makes the sign of sin irrelevant
            logs[i] = math.log(abs(math.sin(u) / u)) if math.sin(u) != 0 else -math.inf
        elif u > _SINH_GUARD:
            logs[i] = u - math.log(2.0) - math.log(u)
        else:
            logs[i] = math.log(math.sinh(u) / u)
    if log:
        if pts.size != 1:
            raise ValueError("log mode needs a single point mass")
        return 2 * j * logs[0]
    expo = 2 * j * logs
    vals = np.where(expo > _SINH_GUARD, math.inf, np.exp(np.minimum(expo, _SINH_GUARD)))
    return float(np.sum(w * vals) / np.sum(w))
