"""Sliding-window Legendre basis machinery.

Provides the translated-Legendre (LegT) coefficient dynamics matrices, the
orthonormal shifted basis over a width-``delta`` window, quadrature
projection, reconstruction from coefficients, and the tail bound that
controls the gap between a forward trajectory and its reconstruction from
a finite coefficient bank.
"""

from __future__ import annotations

import json
import math

import numpy as np
from numpy.polynomial.legendre import leggauss

__all__ = [
    "LegTBasis",
    "legendre_eval",
    "legendre_table",
    "build_legt",
    "basis_eval",
    "project_quadrature",
    "reconstruct",
    "hurwitz_zeta",
    "theorem1_bound",
]

# Window-membership checks allow this much slack (relative to the window
# width) so that quadrature nodes sitting on the boundary are accepted.
_WINDOW_EPS = 1e-9


def legendre_eval(n: int, x):
    """Evaluate the Legendre polynomial L_n at x via the Bonnet recurrence.

    Accepts scalars or arrays; |L_n(x)| <= 1 holds on [-1, 1].  Values of x
    outside [-1, 1] are permitted (useful for extrapolation diagnostics) but
    boundedness is no longer guaranteed.
    """
    if n < 0:
        raise ValueError("polynomial degree must be >= 0")
    x = np.asarray(x, dtype=float)
    if n == 0:
        out = np.ones_like(x)
    elif n == 1:
        out = x.copy()
    else:
        p_prev = np.ones_like(x)
        p_cur = x.copy()
        for k in range(2, n + 1):
            p_prev, p_cur = p_cur, ((2 * k - 1) * x * p_cur - (k - 1) * p_prev) / k
        out = p_cur
    return out if out.ndim else float(out)


def legendre_table(n_max: int, x: np.ndarray) -> np.ndarray:
    """Stack L_0..L_{n_max-1} evaluated at x, shape (len(x), n_max)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    table = np.empty((x.size, n_max))
    table[:, 0] = 1.0
    if n_max > 1:
        table[:, 1] = x
    for k in range(2, n_max):
        table[:, k] = ((2 * k - 1) * x * table[:, k - 1] - (k - 1) * table[:, k - 2]) / k
    return table


class LegTBasis:
    """Degree-N shifted Legendre basis over a sliding window of width delta.

    Holds the coefficient-dynamics matrices ``a`` (N x N, units 1/time) and
    ``b`` (length N, units 1/time) such that a bank driven by a scalar signal
    f evolves as dc/dt = a c + b f.  The dimensionless forms satisfy
    a = -a_hat/delta and b = b_hat/delta, with a_hat's column 0 equal to
    b_hat (so c = e_0 is the fixed point under constant unit forcing).
    """

    __slots__ = ("n", "delta", "a", "b")

    def __init__(self, n: int, delta: float, a: np.ndarray, b: np.ndarray):
        if n < 1:
            raise ValueError("basis needs at least one polynomial")
        if delta <= 0:
            raise ValueError("window width must be positive")
        self.n = int(n)
        self.delta = float(delta)
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.a.shape != (n, n) or self.b.shape != (n,):
            raise ValueError("matrix shapes inconsistent with n")

    @property
    def a_hat(self) -> np.ndarray:
        """Dimensionless dynamics matrix (positive-real-part spectrum)."""
        return -self.delta * self.a

    @property
    def b_hat(self) -> np.ndarray:
        return self.delta * self.b

    def eval_all(self, s, t: float) -> np.ndarray:
        """Evaluate all N orthonormal window polynomials at times s.

        Returns shape (len(s), N) for array s, or (N,) for scalar s.  The
        polynomials are orthonormal under the measure (1/delta) on
        [t - delta, t].
        """
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        x = 2.0 * (s_arr - t) / self.delta + 1.0
        table = legendre_table(self.n, x)
        table *= np.sqrt(2 * np.arange(self.n) + 1.0)
        if np.ndim(s) == 0:
            return table[0]
        return table

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "delta": self.delta,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LegTBasis":
        return cls(d["n"], d["delta"], np.array(d["a"]), np.array(d["b"]))

    @classmethod
    def from_json(cls, s: str) -> "LegTBasis":
        return cls.from_dict(json.loads(s))

    def __repr__(self) -> str:
        return f"LegTBasis(n={self.n}, delta={self.delta})"


def build_legt(n: int, delta: float) -> LegTBasis:
    """Build the width-delta translated-Legendre coefficient dynamics.

    a_hat[i, k] = sqrt(2i+1) sqrt(2k+1) * (1 if k <= i else (-1)^(i-k)),
    b_hat[i] = sqrt(2i+1); the returned basis carries a = -a_hat/delta and
    b = b_hat/delta.
    """
    if n < 1:
        raise ValueError("basis needs at least one polynomial")
    if delta <= 0:
        raise ValueError("window width must be positive")
    scale = np.sqrt(2 * np.arange(n) + 1.0)
    i = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    signs = np.where(k <= i, 1.0, np.where((k - i) % 2 == 0, 1.0, -1.0))
    a_hat = np.outer(scale, scale) * signs
    b_hat = scale.copy()
    return LegTBasis(n, delta, -a_hat / delta, b_hat / delta)


def basis_eval(basis: LegTBasis, n: int, s, t: float):
    """Evaluate the n-th orthonormal window polynomial at time s.

    p_n(s) = sqrt(2n+1) * L_n(2(s-t)/delta + 1); s outside [t-delta, t] is
    allowed but carries zero measure weight.
    """
    if not 0 <= n < basis.n:
        raise ValueError(f"degree {n} outside basis (N={basis.n})")
    x = 2.0 * (np.asarray(s, dtype=float) - t) / basis.delta + 1.0
    return math.sqrt(2 * n + 1) * legendre_eval(n, x)


def _quad_nodes(basis: LegTBasis, t: float, num_nodes: int | None):
    if num_nodes is None:
        num_nodes = max(64, 2 * basis.n)
    y, w = leggauss(num_nodes)
    s = t - basis.delta + basis.delta * (y + 1.0) / 2.0
    # weights already include the (1/delta) measure normalization
    return s, w / 2.0


def project_quadrature(
    f, basis: LegTBasis, t: float, num_nodes: int | None = None
) -> np.ndarray:
    """Project a scalar signal onto the window basis by Gauss quadrature.

    c_n = integral of f(s) p_n(s) (1/delta) ds over [t - delta, t], computed
    with Q = max(64, 2N) Gauss-Legendre nodes by default; exact whenever f is
    a polynomial of degree <= 2Q - 1 - (N - 1).  ``f`` must accept an ndarray
    of sample times.
    """
    s, w = _quad_nodes(basis, t, num_nodes)
    fs = np.asarray(f(s), dtype=float)
    if fs.shape != s.shape:
        raise ValueError("signal must return one value per sample time")
    table = basis.eval_all(s, t)
    return table.T @ (w * fs)


def reconstruct(c: np.ndarray, basis: LegTBasis, t: float, s):
    """Evaluate sum_n c_n p_n(s) for s inside the window [t - delta, t]."""
    c = np.asarray(c, dtype=float)
    if c.shape != (basis.n,):
        raise ValueError(f"coefficient vector must have length {basis.n}")
    s_arr = np.asarray(s, dtype=float)
    lo, hi = t - basis.delta, t
    slack = _WINDOW_EPS * basis.delta
    if np.any(s_arr < lo - slack) or np.any(s_arr > hi + slack):
        raise ValueError(f"query time outside reconstruction window [{lo}, {hi}]")
    out = basis.eval_all(s_arr, t) @ c
    return float(out[0]) if np.ndim(s) == 0 else out


_ZETA_TERMS = 64


def hurwitz_zeta(s: float, a: float) -> float:
    """Hurwitz zeta: sum_{k>=0} (k+a)^(-s) for s > 1, a > 0.

    Direct summation of the first 64 terms plus a second-order
    Euler-Maclaurin tail (integral, half-term, B_2 and B_4 corrections),
    which exceeds 1e-10 relative accuracy for the exponents used here.
    """
    if s <= 1:
        raise ValueError("zeta exponent must exceed 1")
    if a <= 0:
        raise ValueError("zeta offset must be positive")
    s, a = float(s), float(a)
    k = np.arange(_ZETA_TERMS, dtype=float) + a
    head = float(np.sum(k ** (-s)))
    m = a + _ZETA_TERMS
    tail = (
        m ** (1.0 - s) / (s - 1.0)
        + 0.5 * m ** (-s)
        + s * m ** (-s - 1.0) / 12.0
        - s * (s + 1.0) * (s + 2.0) * m ** (-s - 3.0) / 720.0
    )
    return head + tail


def theorem1_bound(delta: float, lip: float, k_obs: int, n: int, s_k: float) -> float:
    """Tail bound on the windowed MSE between a forward path and its
    degree-N reconstruction.

    The path is assumed piecewise ``lip``-Lipschitz on a width-``delta``
    window with ``k_obs`` jumps of cumulative magnitude ``s_k``; ``n`` is the
    number of coefficients kept.  Requires n >= 2.
    """
    if n < 2:
        raise ValueError("bound requires at least two coefficients")
    if delta < 0 or lip < 0 or k_obs < 0 or s_k < 0:
        raise ValueError("bound arguments must be nonnegative")
    term_smooth = (delta * lip * (k_obs + 1)) ** 2 / (2.0 * (1 + 2 * n) * (4 * n - 2))
    term_cross = (
        2.0
        * math.sqrt(2.0)
        * delta
        * lip
        * (k_obs + 1)
        * s_k
        * hurwitz_zeta(1.5, n - 1)
    )
    term_jump = s_k**2 * hurwitz_zeta(2.0, n) / (8.0 * math.pi)
    return term_smooth + term_cross + term_jump
