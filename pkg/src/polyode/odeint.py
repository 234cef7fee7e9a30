"""Numerical integrators and stiffness diagnostics.

Three methods: fixed-step explicit Euler, the adaptive Dormand-Prince 4(5)
embedded pair with PI step control, and a 4-step Adams-Moulton
predictor-corrector (Adams-Bashforth-4 predictor) bootstrapped with three
tight-tolerance Dormand-Prince micro-steps.  Fields that declare a linear
part get an exact pre-factorized corrector solve, which is what makes the
implicit method usable on the stiff coefficient-bank subsystem.

The integrators are generic over the state: any object supporting ``+``,
scalar ``*``, and the small protocol used below (``combine``, ``detach``,
``inf_norm``, ``err_rms``) works; plain ndarrays are supported natively.

Also hosts the dense eigensolver (Householder Hessenberg reduction followed
by Francis double-shift QR) used for the stiffness-ratio analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SolverConfig",
    "IntegrationStats",
    "MaxStepsExceeded",
    "LinearField",
    "integrate",
    "hessenberg",
    "eigen_real_parts",
    "stiffness_ratio",
]


@dataclass
class SolverConfig:
    """Integrator choice plus step/tolerance/iteration knobs.

    ``step`` is the fixed step for euler/am4 and the initial-step hint for
    dopri5.  ``bootstrap_rtol``/``bootstrap_atol`` control the Dormand-Prince
    micro-steps that start the Adams-Moulton history.
    """

    method: str = "am4"
    step: float = 0.05
    rtol: float = 1e-6
    atol: float = 1e-8
    corrector_iters: int = 2
    max_steps: int = 500_000
    bootstrap_rtol: float = 1e-8
    bootstrap_atol: float = 1e-11
    divergence_guard: float = 1e8

    def __post_init__(self):
        if self.method not in ("euler", "dopri5", "am4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.corrector_iters < 1:
            raise ValueError("need at least one corrector iteration")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "step": self.step,
            "rtol": self.rtol,
            "atol": self.atol,
            "corrector_iters": self.corrector_iters,
            "max_steps": self.max_steps,
            "bootstrap_rtol": self.bootstrap_rtol,
            "bootstrap_atol": self.bootstrap_atol,
            "divergence_guard": self.divergence_guard,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass
class IntegrationStats:
    steps_taken: int = 0
    rejected_steps: int = 0
    rhs_evals: int = 0
    diverged: bool = False

    def merge(self, other: "IntegrationStats") -> None:
        self.steps_taken += other.steps_taken
        self.rejected_steps += other.rejected_steps
        self.rhs_evals += other.rhs_evals
        self.diverged = self.diverged or other.diverged


class MaxStepsExceeded(RuntimeError):
    """Raised when an integration hits the step budget; carries partial stats."""

    def __init__(self, msg: str, stats: IntegrationStats):
        super().__init__(msg)
        self.stats = stats


class LinearField:
    """Vector field f(t, y) = M y + b(t) with an exact shifted solve.

    ``b`` may be None, a constant vector, or a callable t -> vector.  The
    Adams-Moulton corrector uses ``solve_shifted`` to solve
    (I - alpha M) x = rhs exactly; the solve operator is precomputed and
    cached per alpha.
    """

    def __init__(self, m: np.ndarray, b=None):
        self.m = np.asarray(m, dtype=float)
        if self.m.ndim != 2 or self.m.shape[0] != self.m.shape[1]:
            raise ValueError("matrix must be square")
        self.b = b
        self._solve_cache: dict[float, np.ndarray] = {}

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        out = self.m @ y
        forcing = self.forcing(t)
        if forcing is not None:
            out = out + forcing
        return out

    def forcing(self, t: float):
        if self.b is None:
            return None
        if callable(self.b):
            return np.asarray(self.b(t), dtype=float)
        return self.b

    def solve_shifted(self, alpha: float, rhs: np.ndarray) -> np.ndarray:
        key = float(alpha)
        op = self._solve_cache.get(key)
        if op is None:
            eye = np.eye(self.m.shape[0])
            op = np.linalg.inv(eye - alpha * self.m)
            self._solve_cache[key] = op
        return op @ rhs


# ---------------------------------------------------------------------------
# state protocol helpers (ndarray fallback)


def _detach(y):
    return y.detach() if hasattr(y, "detach") else y


def _inf_norm(y) -> float:
    if hasattr(y, "inf_norm"):
        return y.inf_norm()
    y = np.asarray(y)
    return float(np.max(np.abs(y))) if y.size else 0.0


def _err_rms(err, y0, y1, atol: float, rtol: float) -> float:
    """RMS of the error scaled by the mixed atol/rtol tolerance."""
    if hasattr(err, "err_rms"):
        return err.err_rms(y0, y1, atol, rtol)
    scale = atol + rtol * np.maximum(np.abs(np.asarray(y0)), np.abs(np.asarray(y1)))
    r = np.asarray(err) / scale
    return float(np.sqrt(np.mean(r * r))) if r.size else 0.0


def _combine(y, terms):
    """y + sum of coef*k over (coef, k) pairs, fused when the state supports it."""
    if hasattr(y, "combine"):
        return y.combine(terms)
    out = y
    for coef, k in terms:
        out = out + coef * k
    return out


def _finite(y) -> bool:
    if hasattr(y, "all_finite"):
        return y.all_finite()
    return bool(np.all(np.isfinite(np.asarray(y))))


# ---------------------------------------------------------------------------
# Dormand-Prince 4(5)

_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_ERR = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)


def _dopri5(f, t0, t1, y0, cfg, stats, rtol=None, atol=None, h_init=None):
    rtol = cfg.rtol if rtol is None else rtol
    atol = cfg.atol if atol is None else atol
    span = t1 - t0
    t, y = t0, y0
    h = min(span, cfg.step if h_init is None else h_init)
    err_prev = 1e-4
    while t < t1:
        if stats.steps_taken + stats.rejected_steps >= cfg.max_steps:
            raise MaxStepsExceeded(
                f"dopri5 exceeded {cfg.max_steps} steps on [{t0}, {t1}]", stats
            )
        remaining = t1 - t
        final = h >= remaining * (1.0 - 1e-12)
        if final:
            h = remaining
        ks = []
        for i in range(7):
            if i == 0:
                yi = y
            else:
                yi = _combine(y, [(h * a, k) for a, k in zip(_DP_A[i], ks) if a != 0.0])
            ks.append(f(t + _DP_C[i] * h, yi))
            stats.rhs_evals += 1
        y_new = _combine(y, [(h * b, k) for b, k in zip(_DP_B5, ks) if b != 0.0])
        ks_raw = [_detach(k) for k in ks]
        err = _combine(
            0.0 * ks_raw[0], [(h * e, k) for e, k in zip(_DP_ERR, ks_raw) if e != 0.0]
        )
        ratio = _err_rms(err, _detach(y), _detach(y_new), atol, rtol)
        if not math.isfinite(ratio):
            stats.rejected_steps += 1
            h *= 0.25
        elif ratio <= 1.0:
            t = t1 if final else t + h
            y = y_new
            stats.steps_taken += 1
            if not _finite(y) or _inf_norm(y) > cfg.divergence_guard:
                stats.diverged = True
                return y, t
            fac = 0.9 * ratio ** (-0.14) * err_prev**0.08
            h *= min(5.0, max(0.2, fac))
            err_prev = max(ratio, 1e-4)
        else:
            stats.rejected_steps += 1
            fac = 0.9 * ratio ** (-0.2)
            h *= min(1.0, max(0.2, fac))
        if h < 1e-14 * max(1.0, abs(t)):
            # step underflow: the error estimate cannot be met, which in this
            # code base only happens on blowing-up trajectories
            stats.diverged = True
            return y, t
    return y, t


# ---------------------------------------------------------------------------
# fixed-step methods

_AB4 = (55 / 24, -59 / 24, 37 / 24, -9 / 24)
_AM4 = (251 / 720, 646 / 720, -264 / 720, 106 / 720, -19 / 720)


def _euler(f, t0, t1, y0, cfg, stats):
    n = max(1, math.ceil((t1 - t0) / cfg.step))
    if n > cfg.max_steps:
        raise MaxStepsExceeded(f"euler needs {n} steps > max_steps", stats)
    h = (t1 - t0) / n
    y = y0
    for j in range(n):
        k = f(t0 + j * h, y)
        stats.rhs_evals += 1
        y = _combine(y, [(h, k)])
        stats.steps_taken += 1
        if not _finite(y) or _inf_norm(y) > cfg.divergence_guard:
            stats.diverged = True
            return y
    return y


def _am4_step_kind(f) -> str:
    if hasattr(f, "solve_shifted"):
        return "semilinear" if hasattr(f, "nonlinear") else "linear"
    return "generic"


def _am4(f, t0, t1, y0, cfg, stats):
    n = max(1, math.ceil((t1 - t0) / cfg.step))
    if n > cfg.max_steps:
        raise MaxStepsExceeded(f"am4 needs {n} steps > max_steps", stats)
    h = (t1 - t0) / n
    kind = _am4_step_kind(f)
    n_boot = min(3, n)
    ys = [y0]
    y = y0
    for j in range(n_boot):
        y, _ = _dopri5(
            f,
            t0 + j * h,
            t0 + (j + 1) * h,
            y,
            cfg,
            stats,
            rtol=cfg.bootstrap_rtol,
            atol=cfg.bootstrap_atol,
            h_init=h,
        )
        if stats.diverged:
            return y
        ys.append(y)
    fs = []
    for j, yj in enumerate(ys):
        fs.append(f(t0 + j * h, yj))
        stats.rhs_evals += 1
    for j in range(n_boot, n):
        t_new = t0 + (j + 1) * h
        f3, f2, f1, f0 = fs[-1], fs[-2], fs[-3], fs[-4]
        y_pred = _combine(
            y, [(h * _AB4[0], f3), (h * _AB4[1], f2), (h * _AB4[2], f1), (h * _AB4[3], f0)]
        )
        base = _combine(
            y, [(h * _AM4[1], f3), (h * _AM4[2], f2), (h * _AM4[3], f1), (h * _AM4[4], f0)]
        )
        alpha = h * _AM4[0]
        if kind == "linear":
            forcing = f.forcing(t_new)
            rhs = base if forcing is None else _combine(base, [(alpha, forcing)])
            y = f.solve_shifted(alpha, rhs)
        elif kind == "semilinear":
            y = y_pred
            for _ in range(cfg.corrector_iters):
                g = f.nonlinear(t_new, y)
                stats.rhs_evals += 1
                y = f.solve_shifted(alpha, _combine(base, [(alpha, g)]))
        else:
            y = y_pred
            for _ in range(cfg.corrector_iters):
                g = f(t_new, y)
                stats.rhs_evals += 1
                y = _combine(base, [(alpha, g)])
        f_new = f(t_new, y)
        stats.rhs_evals += 1
        fs.append(f_new)
        if len(fs) > 4:
            fs.pop(0)
        stats.steps_taken += 1
        if not _finite(y) or _inf_norm(y) > cfg.divergence_guard:
            stats.diverged = True
            return y
    return y


def integrate(f, t0: float, t1: float, y0, cfg: SolverConfig):
    """Advance y' = f(t, y) from t0 to t1; returns (state, IntegrationStats).

    Divergence (non-finite state or inf-norm beyond the guard) is reported
    through ``stats.diverged`` rather than an exception so benchmarks can
    record it; exceeding ``max_steps`` raises :class:`MaxStepsExceeded`.
    """
    if t1 < t0:
        raise ValueError("integration requires t1 >= t0")
    stats = IntegrationStats()
    if t1 == t0:
        return y0, stats
    if cfg.method == "euler":
        y = _euler(f, t0, t1, y0, cfg, stats)
    elif cfg.method == "dopri5":
        y, _ = _dopri5(f, t0, t1, y0, cfg, stats)
    else:
        y = _am4(f, t0, t1, y0, cfg, stats)
    return y, stats


# ---------------------------------------------------------------------------
# dense eigenvalues: Householder Hessenberg + Francis double-shift QR

_EIG_MAX_N = 256


def hessenberg(m: np.ndarray) -> np.ndarray:
    """Reduce a square matrix to upper Hessenberg form by Householder
    similarity transforms."""
    h = np.array(m, dtype=float)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1 :, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(norm_x, x[0] if x[0] != 0 else 1.0)
        v_norm = np.linalg.norm(v)
        if v_norm == 0.0:
            continue
        v /= v_norm
        h[k + 1 :, k:] -= 2.0 * np.outer(v, v @ h[k + 1 :, k:])
        h[:, k + 1 :] -= 2.0 * np.outer(h[:, k + 1 :] @ v, v)
    return h


def _eig2x2(block: np.ndarray) -> list[complex]:
    a, b = block[0]
    c, d = block[1]
    half_tr = 0.5 * (a + d)
    disc = 0.25 * (a - d) ** 2 + b * c
    if disc >= 0.0:
        root = math.sqrt(disc)
        return [complex(half_tr + root), complex(half_tr - root)]
    root = math.sqrt(-disc)
    return [complex(half_tr, root), complex(half_tr, -root)]


def _apply_house_left(h, v, row, col_lo, col_hi):
    seg = h[row : row + v.size, col_lo:col_hi]
    seg -= 2.0 * np.outer(v, v @ seg)


def _apply_house_right(h, v, col, row_lo, row_hi):
    seg = h[row_lo:row_hi, col : col + v.size]
    seg -= 2.0 * np.outer(seg @ v, v)


def _house3(x: np.ndarray) -> np.ndarray | None:
    norm_x = np.linalg.norm(x)
    if norm_x == 0.0:
        return None
    v = x.copy()
    v[0] += math.copysign(norm_x, x[0] if x[0] != 0 else 1.0)
    norm_v = np.linalg.norm(v)
    if norm_v == 0.0:
        return None
    return v / norm_v


def _hessenberg_eigvals(h: np.ndarray, max_sweeps: int) -> np.ndarray:
    h = h.copy()
    n = h.shape[0]
    eps = np.finfo(float).eps
    eig: list[complex] = []
    ihi = n - 1
    sweeps = 0
    stagnant = 0
    while ihi >= 0:
        if ihi == 0:
            eig.append(complex(h[0, 0]))
            break
        for k in range(1, ihi + 1):
            if abs(h[k, k - 1]) <= eps * (abs(h[k - 1, k - 1]) + abs(h[k, k])):
                h[k, k - 1] = 0.0
        ilo = ihi
        while ilo > 0 and h[ilo, ilo - 1] != 0.0:
            ilo -= 1
        if ilo == ihi:
            eig.append(complex(h[ihi, ihi]))
            ihi -= 1
            stagnant = 0
            continue
        if ilo == ihi - 1:
            eig.extend(_eig2x2(h[ilo : ihi + 1, ilo : ihi + 1]))
            ihi -= 2
            stagnant = 0
            continue
        sweeps += 1
        stagnant += 1
        if sweeps > max_sweeps:
            raise RuntimeError(
                f"eigenvalue iteration failed to converge for {n}x{n} matrix"
            )
        if stagnant % 20 == 0:
            # exceptional shift to break symmetric stalls
            s = abs(h[ihi, ihi - 1]) + abs(h[ihi - 1, ihi - 2])
            tr, det = 1.5 * s, s * s
        else:
            tr = h[ihi - 1, ihi - 1] + h[ihi, ihi]
            det = (
                h[ihi - 1, ihi - 1] * h[ihi, ihi]
                - h[ihi - 1, ihi] * h[ihi, ihi - 1]
            )
        x = h[ilo, ilo] ** 2 + h[ilo, ilo + 1] * h[ilo + 1, ilo] - tr * h[ilo, ilo] + det
        y = h[ilo + 1, ilo] * (h[ilo, ilo] + h[ilo + 1, ilo + 1] - tr)
        z = h[ilo + 2, ilo + 1] * h[ilo + 1, ilo] if ilo + 2 <= ihi else 0.0
        for k in range(ilo, ihi - 1):
            m = min(k + 3, ihi + 1)
            v = _house3(np.array([x, y, z][: m - k]))
            if v is not None:
                col_lo = max(ilo, k - 1)
                _apply_house_left(h, v, k, col_lo, ihi + 1)
                _apply_house_right(h, v, k, ilo, min(k + 4, ihi + 1))
            x = h[k + 1, k]
            y = h[k + 2, k] if k + 2 <= ihi else 0.0
            z = h[k + 3, k] if k + 3 <= ihi else 0.0
        v = _house3(np.array([x, y]))
        if v is not None:
            _apply_house_left(h, v, ihi - 1, max(ilo, ihi - 2), ihi + 1)
            _apply_house_right(h, v, ihi - 1, ilo, ihi + 1)
    return np.array(eig)


def _verify_eigenvalue(m: np.ndarray, lam: complex, tol: float) -> None:
    n = m.shape[0]
    scale = 1.0 + abs(lam)
    start = np.ones(n) + np.linspace(0.0, 0.5, n)
    for attempt in range(4):
        delta = scale * 10.0 ** (-8 + 2 * attempt)
        shift = lam + (delta if lam.imag == 0 else delta * (1 + 0.5j))
        a = m.astype(complex) - shift * np.eye(n)
        v = start.astype(complex)
        try:
            for _ in range(3):
                v = np.linalg.solve(a, v)
                v = v / np.linalg.norm(v)
        except np.linalg.LinAlgError:
            continue
        res = np.linalg.norm(m @ v - lam * v) / np.linalg.norm(v)
        if res < tol:
            return
    raise RuntimeError(
        f"eigenvalue {lam} of {n}x{n} matrix failed residual verification"
    )


def eigen_real_parts(m: np.ndarray, verify: bool = True) -> np.ndarray:
    """Sorted real parts of all eigenvalues of a dense real matrix.

    Uses Householder Hessenberg reduction followed by Francis double-shift
    QR iteration (sweep cap 100 n).  With ``verify`` each eigenvalue is
    checked to residual 1e-6 via inverse iteration on the original matrix.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    n = m.shape[0]
    if n > _EIG_MAX_N:
        raise ValueError(f"matrix size {n} exceeds supported {_EIG_MAX_N}")
    if n == 1:
        return np.array([m[0, 0]])
    vals = _hessenberg_eigvals(hessenberg(m), 100 * n)
    if verify:
        for lam in vals:
            _verify_eigenvalue(m, complex(lam), 1e-6)
    return np.sort(vals.real)


def stiffness_ratio(m: np.ndarray) -> float:
    """max |Re lambda| / min |Re lambda| over the spectrum of m.

    Raises when any eigenvalue real part is (numerically) zero, in which
    case the ratio is undefined.
    """
    re = eigen_real_parts(m)
    mags = np.abs(re)
    tol = 1e-9 * max(1.0, float(mags.max(initial=0.0)))
    if mags.size == 0 or float(mags.min()) <= tol:
        raise ValueError("stiffness ratio undefined: eigenvalue with zero real part")
    return float(mags.max() / mags.min())
