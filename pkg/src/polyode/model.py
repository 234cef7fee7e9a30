"""Coefficient-bank-augmented neural ODE: state machine and sequence runner.

The hidden state pairs a neural-ODE block h(t) with per-dimension Legendre
coefficient banks c^j(t).  Between observations the joint system

    dh/dt   = phi(h)            (learned network)
    dc^j/dt = A c^j + B h0_j    (fixed window-projection dynamics)

is integrated; at an observation the banks are copied into the matching
h-block slots and the observed entries of h0 are reset to the data.  Banks
never feed back into dh/dt during integration, so they act purely as memory.

The bank subsystem is stiff but linear, which the Adams-Moulton corrector
exploits through an exact shifted solve; the nonlinear remainder (the
network) is handled by functional iteration.  A batched runner integrates
many sequences jointly on a shared per-segment grid (normalized-clock trick)
so training stays fast without changing the per-sequence semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ops
from .autodiff import BoundParams, ModelParams, Tape, mlp_forward, val
from .odeint import IntegrationStats, SolverConfig, integrate
from .orthopoly import LegTBasis, build_legt

__all__ = [
    "PolyODEConfig",
    "PolyODEState",
    "TimeSeries",
    "DivergenceError",
    "integration_step",
    "update_step",
    "run_sequence",
    "run_sequences",
    "forecast",
    "reverse_reconstruct",
    "embed",
    "forward_path",
    "BatchResult",
]


class DivergenceError(RuntimeError):
    """Raised when the solver diverges inside a model operation."""

    def __init__(self, stats: IntegrationStats):
        super().__init__("solver diverged (state norm exceeded the guard)")
        self.stats = stats


@dataclass
class PolyODEConfig:
    """Model dimensions, solver choice, and loss."""

    d: int
    n_coeffs: int = 32
    delta: float = 5.0
    d_free: int = 0
    with_sigma: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    loss: str = "mse"
    hidden: tuple = (64, 64)
    sigma_hidden: tuple = (64,)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("need at least one input dimension")
        if self.n_coeffs < 2:
            raise ValueError("need at least two coefficients per bank")
        if self.delta <= 0:
            raise ValueError("window width must be positive")
        if self.d_free < 0:
            raise ValueError("d_free must be nonnegative")
        if self.loss not in ("mse", "gaussian_nll"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "gaussian_nll" and not self.with_sigma:
            raise ValueError("gaussian_nll loss requires with_sigma")
        self.hidden = tuple(self.hidden)
        self.sigma_hidden = tuple(self.sigma_hidden)

    @property
    def h_width(self) -> int:
        return self.d + self.n_coeffs * self.d + self.d_free

    def new_basis(self) -> LegTBasis:
        return build_legt(self.n_coeffs, self.delta)

    def new_params(self, seed: int = 0) -> ModelParams:
        widths = [self.h_width, *self.hidden, self.h_width]
        sigma = [self.h_width, *self.sigma_hidden, self.d] if self.with_sigma else None
        return ModelParams.init(widths, sigma, seed=seed)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_coeffs": self.n_coeffs,
            "delta": self.delta,
            "d_free": self.d_free,
            "with_sigma": self.with_sigma,
            "solver": self.solver.to_dict(),
            "loss": self.loss,
            "hidden": list(self.hidden),
            "sigma_hidden": list(self.sigma_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolyODEConfig":
        d = dict(d)
        d["solver"] = SolverConfig.from_dict(d["solver"])
        d["hidden"] = tuple(d["hidden"])
        d["sigma_hidden"] = tuple(d["sigma_hidden"])
        return cls(**d)


class TimeSeries:
    """Irregularly sampled multivariate sequence with observation masks."""

    __slots__ = ("times", "values", "mask", "label")

    def __init__(self, times, values, mask=None, label=None):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.mask = (
            np.ones_like(self.values)
            if mask is None
            else np.asarray(mask, dtype=float)
        )
        self.label = label
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError("need a nonempty 1-D time vector")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing (no duplicates)")
        if self.values.shape != (self.times.size, self.d) or self.mask.shape != self.values.shape:
            raise ValueError("values/mask shapes do not match times")
        if not (np.isfinite(self.times).all() and np.isfinite(self.values).all()):
            raise ValueError("times and values must be finite")
        if not np.any(self.mask > 0):
            raise ValueError("need at least one observed entry")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.times.size


@dataclass
class PolyODEState:
    """Hidden block h, per-dimension banks c, and optional sigma banks."""

    t: float
    h: np.ndarray
    c: np.ndarray
    c_sigma: np.ndarray | None = None


# ---------------------------------------------------------------------------
# solver state: (h, c, c_sigma) triple satisfying the integrator protocol


class _StateVec:
    __slots__ = ("h", "c", "cs")

    def __init__(self, h, c, cs=None):
        self.h = h
        self.c = c
        self.cs = cs

    def _zip(self, other):
        yield self.h, other.h
        yield self.c, other.c
        if self.cs is not None:
            yield self.cs, other.cs

    def __add__(self, other):
        return _StateVec(
            ops.add(self.h, other.h),
            ops.add(self.c, other.c),
            None if self.cs is None else ops.add(self.cs, other.cs),
        )

    def __mul__(self, s):
        return _StateVec(
            ops.scale(self.h, s),
            ops.scale(self.c, s),
            None if self.cs is None else ops.scale(self.cs, s),
        )

    __rmul__ = __mul__

    def combine(self, terms):
        parts_h = [(1.0, self.h)] + [(c, sv.h) for c, sv in terms]
        parts_c = [(1.0, self.c)] + [(c, sv.c) for c, sv in terms]
        cs = None
        if self.cs is not None:
            cs = ops.lincomb([(1.0, self.cs)] + [(c, sv.cs) for c, sv in terms])
        return _StateVec(ops.lincomb(parts_h), ops.lincomb(parts_c), cs)

    def detach(self) -> "_StateVec":
        return _StateVec(val(self.h), val(self.c), None if self.cs is None else val(self.cs))

    def copy_raw(self) -> "_StateVec":
        d = self.detach()
        return _StateVec(
            np.array(d.h), np.array(d.c), None if d.cs is None else np.array(d.cs)
        )

    def _raw_arrays(self):
        out = [np.asarray(val(self.h)), np.asarray(val(self.c))]
        if self.cs is not None:
            out.append(np.asarray(val(self.cs)))
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self._raw_arrays())

    def inf_norm(self) -> float:
        return max(float(np.max(np.abs(a))) for a in self._raw_arrays())

    def err_rms(self, y0, y1, atol: float, rtol: float) -> float:
        total, count = 0.0, 0
        for (e, a0), (_, a1) in zip(self._zip(y0), self._zip(y1)):
            e, a0, a1 = np.asarray(val(e)), np.asarray(val(a0)), np.asarray(val(a1))
            sc = atol + rtol * np.maximum(np.abs(a0), np.abs(a1))
            r = e / sc
            total += float(np.sum(r * r))
            count += r.size
        return math.sqrt(total / count)


def _zeros_state(cfg: PolyODEConfig, batch: int) -> _StateVec:
    return _StateVec(
        np.zeros((batch, cfg.h_width)),
        np.zeros((batch, cfg.d, cfg.n_coeffs)),
        np.zeros((batch, cfg.d, cfg.n_coeffs)) if cfg.with_sigma else None,
    )


class PolyField:
    """Joint vector field over (h, banks, sigma banks).

    Declares the stiff linear part (bank dynamics plus the h0 coupling) for
    the Adams-Moulton exact corrector via ``solve_shifted``; the network
    remainder goes through ``nonlinear``.
    """

    def __init__(self, params, basis: LegTBasis, cfg: PolyODEConfig):
        self.params = params
        self.cfg = cfg
        self.a = basis.a
        self.a_t = np.ascontiguousarray(basis.a.T)
        self.b_row = basis.b.reshape(1, 1, -1)
        self._solve_cache: dict = {}

    def _bank_rhs(self, banks, readout):
        force = ops.mul(ops.reshape(readout, (-1, self.cfg.d, 1)), self.b_row)
        return ops.add(ops.matmul(banks, self.a_t), force)

    def __call__(self, t, y: _StateVec) -> _StateVec:
        dh = mlp_forward(self.params, y.h)
        h0 = ops.slice_last(y.h, 0, self.cfg.d)
        dc = self._bank_rhs(y.c, h0)
        dcs = None
        if y.cs is not None:
            dcs = self._bank_rhs(y.cs, mlp_forward(self.params, y.h, head="sigma"))
        return _StateVec(dh, dc, dcs)

    def nonlinear(self, t, y: _StateVec) -> _StateVec:
        dh = mlp_forward(self.params, y.h)
        dc = np.zeros(np.shape(val(y.c)))
        dcs = None
        if y.cs is not None:
            sraw = mlp_forward(self.params, y.h, head="sigma")
            dcs = ops.mul(ops.reshape(sraw, (-1, self.cfg.d, 1)), self.b_row)
        return _StateVec(dh, dc, dcs)

    def _minv_t(self, alpha):
        """Transposed inverse of (I - alpha A); alpha scalar or (B, 1)."""
        key = float(alpha) if np.ndim(alpha) == 0 else alpha.tobytes()
        cached = self._solve_cache.get(key)
        if cached is not None:
            return cached
        n = self.a.shape[0]
        eye = np.eye(n)
        if np.ndim(alpha) == 0:
            minv_t = np.ascontiguousarray(np.linalg.inv(eye - alpha * self.a).T)
        else:
            mats = eye[None, :, :] - alpha[:, :, None] * self.a[None, :, :]
            minv_t = np.ascontiguousarray(np.linalg.inv(mats).transpose(0, 2, 1))
        self._solve_cache[key] = minv_t
        return minv_t

    def solve_shifted(self, alpha, rhs: _StateVec) -> _StateVec:
        minv_t = self._minv_t(alpha)
        x_h = rhs.h
        h0 = ops.slice_last(x_h, 0, self.cfg.d)
        coef = (np.reshape(alpha, (-1, 1, 1)) if np.ndim(alpha) else alpha) * self.b_row
        coupled = ops.add(rhs.c, ops.mul(ops.reshape(h0, (-1, self.cfg.d, 1)), coef))
        x_c = ops.matmul(coupled, minv_t)
        x_cs = None if rhs.cs is None else ops.matmul(rhs.cs, minv_t)
        return _StateVec(x_h, x_c, x_cs)


class _ScaledField:
    """Normalized-clock wrapper: member b advances durations[b] per unit tau.

    Lets a batch of segments with different physical lengths share one
    integration grid; members with zero duration are exactly frozen.
    """

    def __init__(self, inner: PolyField, durations: np.ndarray):
        self.inner = inner
        self.d2 = durations.reshape(-1, 1)
        self.d3 = durations.reshape(-1, 1, 1)

    def _scale(self, f: _StateVec) -> _StateVec:
        return _StateVec(
            ops.mul(f.h, self.d2),
            ops.mul(f.c, self.d3),
            None if f.cs is None else ops.mul(f.cs, self.d3),
        )

    def __call__(self, t, y):
        return self._scale(self.inner(t, y))

    def nonlinear(self, t, y):
        return self._scale(self.inner.nonlinear(t, y))

    def solve_shifted(self, alpha, rhs):
        return self.inner.solve_shifted(alpha * self.d2, rhs)


def _integrate_segment(y: _StateVec, durations: np.ndarray, field_fn: PolyField, solver: SolverConfig):
    """Advance every batch member by its own duration on a shared grid."""
    dmax = float(durations.max())
    if dmax <= 0.0:
        return y, IntegrationStats()
    scaled = _ScaledField(field_fn, durations)
    if solver.method in ("euler", "am4"):
        n = max(1, math.ceil(dmax / solver.step - 1e-9))
        sub = replace(solver, step=1.0 / n)
    else:
        sub = replace(solver, step=min(1.0, solver.step / dmax))
    return integrate(scaled, 0.0, 1.0, y, sub)


def _apply_update(y: _StateVec, x: np.ndarray, m: np.ndarray, cfg: PolyODEConfig) -> _StateVec:
    """Masked update: copy banks into the h-block and reset observed h0."""
    d, n = cfg.d, cfg.n_coeffs
    keep = 1.0 - m
    h0 = ops.slice_last(y.h, 0, d)
    h0_new = ops.add(ops.mul(h0, keep), m * x)
    banks = ops.reshape(ops.slice_last(y.h, d, d + d * n), (-1, d, n))
    m3 = m[:, :, None]
    banks_new = ops.add(ops.mul(banks, 1.0 - m3), ops.mul(y.c, m3))
    parts = [h0_new, ops.reshape(banks_new, (-1, d * n))]
    if cfg.d_free:
        parts.append(ops.slice_last(y.h, d + d * n, cfg.h_width))
    return _StateVec(ops.concat_last(parts), y.c, y.cs)


def _step_loss(y: _StateVec, x: np.ndarray, m: np.ndarray, cfg: PolyODEConfig, params):
    """Loss contribution of one observation column (pre-update state)."""
    pred = ops.slice_last(y.h, 0, cfg.d)
    if cfg.loss == "mse":
        return ops.masked_sq_err(pred, x, m)
    sraw = mlp_forward(params, y.h, head="sigma")
    std = ops.softplus(sraw)
    z = ops.div(ops.sub(pred, x), std)
    per_entry = ops.add(
        ops.add(ops.scale(ops.log(std), 2.0), ops.mul(z, z)), math.log(2.0 * math.pi)
    )
    return ops.scale(ops.sum_all(ops.mul(per_entry, m)), 0.5)


@dataclass
class BatchResult:
    """Joint result of running a batch of sequences."""

    loss: object
    final: _StateVec
    t_final: np.ndarray
    predictions: np.ndarray
    per_seq_sq_err: np.ndarray
    per_seq_count: np.ndarray
    diverged: bool
    stats: IntegrationStats
    segments: list | None = None


def _bind_if_needed(params, tape):
    if tape is not None and isinstance(params, ModelParams):
        return params.bind(tape)
    return params


def run_sequences(
    ts_list,
    params,
    basis: LegTBasis,
    cfg: PolyODEConfig,
    tape: Tape = None,
    record_segments: bool = False,
) -> BatchResult:
    """Run the integrate/predict/update loop jointly over a batch.

    Sequences are padded to a common observation count with zero-duration,
    zero-mask columns, which leaves per-sequence results untouched.  The
    returned loss is the sum over the batch of per-sequence loss sums.
    """
    if not ts_list:
        raise ValueError("empty batch")
    for ts in ts_list:
        if ts.d != cfg.d:
            raise ValueError(f"series dimension {ts.d} != model dimension {cfg.d}")
    batch = len(ts_list)
    t_max = max(len(ts) for ts in ts_list)
    times = np.empty((batch, t_max))
    values = np.zeros((batch, t_max, cfg.d))
    mask = np.zeros((batch, t_max, cfg.d))
    for i, ts in enumerate(ts_list):
        n = len(ts)
        times[i, :n] = ts.times
        times[i, n:] = ts.times[-1]
        values[i, :n] = ts.values
        mask[i, :n] = ts.mask
    if np.any(times < 0):
        raise ValueError("observation times must be nonnegative")

    bound = _bind_if_needed(params, tape)
    field_fn = PolyField(bound, basis, cfg)
    y = _zeros_state(cfg, batch)
    t_cur = np.zeros(batch)
    loss = None
    predictions = np.zeros((batch, t_max, cfg.d))
    sq_err = np.zeros(batch)
    counts = np.zeros(batch)
    stats_all = IntegrationStats()
    segments = [] if record_segments else None
    diverged = False
    for k in range(t_max):
        if record_segments:
            segments.append((t_cur.copy(), y.copy_raw()))
        dur = times[:, k] - t_cur
        if float(dur.max()) > 0.0:
            y, seg_stats = _integrate_segment(y, dur, field_fn, cfg.solver)
            stats_all.merge(seg_stats)
            if seg_stats.diverged:
                diverged = True
                break
        x_k, m_k = values[:, k], mask[:, k]
        predictions[:, k] = val(ops.slice_last(y.h, 0, cfg.d))
        resid = m_k * (predictions[:, k] - x_k)
        sq_err += np.sum(resid * resid, axis=1)
        counts += m_k.sum(axis=1)
        loss_k = _step_loss(y, x_k, m_k, cfg, bound)
        loss = loss_k if loss is None else ops.add(loss, loss_k)
        y = _apply_update(y, x_k, m_k, cfg)
        t_cur = times[:, k]
    if record_segments and not diverged:
        segments.append((t_cur.copy(), y.copy_raw()))
    stats_all.diverged = diverged
    return BatchResult(
        loss=loss,
        final=y,
        t_final=t_cur,
        predictions=predictions,
        per_seq_sq_err=sq_err,
        per_seq_count=counts,
        diverged=diverged,
        stats=stats_all,
        segments=segments,
    )


def _state_from_batch(sv: _StateVec, t: np.ndarray, i: int) -> PolyODEState:
    raw = sv.detach()
    return PolyODEState(
        t=float(t[i]),
        h=np.array(raw.h[i]),
        c=np.array(raw.c[i]),
        c_sigma=None if raw.cs is None else np.array(raw.cs[i]),
    )


def _state_to_vec(state: PolyODEState) -> _StateVec:
    return _StateVec(
        state.h[None, :].copy(),
        state.c[None, :, :].copy(),
        None if state.c_sigma is None else state.c_sigma[None, :, :].copy(),
    )


def run_sequence(
    ts: TimeSeries,
    params,
    basis: LegTBasis,
    cfg: PolyODEConfig,
    tape: Tape = None,
    record_segments: bool = False,
):
    """Alternate integration and update steps over one sequence.

    Starts from h(0) = 0, c(0) = 0, reads each prediction just before its
    update, and accumulates the masked loss.  Returns (final state, loss,
    per-step predictions); with ``record_segments`` a fourth element lists
    (segment start time, segment start state) pairs plus the final state,
    which is enough to replay the forward path anywhere.
    """
    res = run_sequences([ts], params, basis, cfg, tape=tape, record_segments=record_segments)
    if res.diverged:
        raise DivergenceError(res.stats)
    state = _state_from_batch(res.final, res.t_final, 0)
    loss = res.loss if tape is not None else float(val(res.loss))
    preds = res.predictions[0]
    if not record_segments:
        return state, loss, preds
    segs = [
        (float(t[0]), _state_from_batch(sv, t, 0)) for t, sv in res.segments
    ]
    return state, loss, preds, segs


def integration_step(
    state: PolyODEState,
    params: ModelParams,
    t_next: float,
    basis: LegTBasis,
    cfg: PolyODEConfig,
) -> PolyODEState:
    """Integrate the joint system from state.t to t_next (no updates)."""
    if t_next < state.t:
        raise ValueError("t_next must not precede the current state time")
    if t_next == state.t:
        return PolyODEState(
            state.t,
            state.h.copy(),
            state.c.copy(),
            None if state.c_sigma is None else state.c_sigma.copy(),
        )
    field_fn = PolyField(params, basis, cfg)
    y, stats = _integrate_segment(
        _state_to_vec(state), np.array([t_next - state.t]), field_fn, cfg.solver
    )
    if stats.diverged:
        raise DivergenceError(stats)
    return _state_from_batch(y, np.array([t_next]), 0)


def update_step(state: PolyODEState, x_i: np.ndarray, m_i: np.ndarray) -> PolyODEState:
    """Copy banks into the h-block and reset observed h0 entries."""
    x = np.asarray(x_i, dtype=float).reshape(1, -1)
    m = np.asarray(m_i, dtype=float).reshape(1, -1)
    d, n = state.c.shape
    if x.shape[1] != d or m.shape[1] != d:
        raise ValueError(f"observation width must be {d}")
    h_width = state.h.size
    cfg_like = _UpdateDims(d, n, h_width)
    y = _apply_update(_state_to_vec(state), x, m, cfg_like)
    return _state_from_batch(y, np.array([state.t]), 0)


class _UpdateDims:
    """Just enough of the config surface for the masked update."""

    def __init__(self, d, n_coeffs, h_width):
        self.d = d
        self.n_coeffs = n_coeffs
        self.h_width = h_width
        self.d_free = h_width - d - d * n_coeffs


def forecast(
    state: PolyODEState,
    params: ModelParams,
    basis: LegTBasis,
    cfg: PolyODEConfig,
    t_star: float,
) -> np.ndarray:
    """Integrate without updates to t_star and return the readout h0."""
    if t_star < state.t:
        raise ValueError("forecast horizon precedes the state time")
    out = integration_step(state, params, t_star, basis, cfg)
    return out.h[: cfg.d].copy()


def _np_softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def reverse_reconstruct(
    state: PolyODEState, basis: LegTBasis, s, sigma: bool = False
):
    """Reconstruct past signal values (and optionally sigma) from the banks.

    Valid for query times inside [state.t - delta, state.t]; returns shape
    (d,) for scalar s or (len(s), d) for an array of query times.
    """
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    lo, hi = state.t - basis.delta, state.t
    slack = 1e-9 * basis.delta
    if np.any(s_arr < lo - slack) or np.any(s_arr > hi + slack):
        raise ValueError(f"query time outside reconstruction window [{lo}, {hi}]")
    table = basis.eval_all(s_arr, state.t)
    mean = table @ state.c.T
    if np.ndim(s) == 0:
        mean = mean[0]
    if not sigma:
        return mean
    if state.c_sigma is None:
        raise ValueError("state carries no sigma banks")
    sig = _np_softplus(table @ state.c_sigma.T)
    if np.ndim(s) == 0:
        sig = sig[0]
    return mean, sig


def embed(ts: TimeSeries, params: ModelParams, basis: LegTBasis, cfg: PolyODEConfig) -> np.ndarray:
    """Final-state embedding [h0; c^1; ...; c^d], length d + N d."""
    state, _, _ = run_sequence(ts, params, basis, cfg)
    return np.concatenate([state.h[: cfg.d], state.c.ravel()])


def forward_path(
    segments,
    params: ModelParams,
    basis: LegTBasis,
    cfg: PolyODEConfig,
    s_values: np.ndarray,
) -> np.ndarray:
    """Evaluate the forward readout g(h(s)) along a recorded run.

    ``segments`` is the list returned by run_sequence(record_segments=True).
    Queries must be sorted ascending and not exceed the final time; times
    before t = 0 return the zero initial readout, and a query at an update
    time returns the pre-update value (the path's left limit).
    """
    s_values = np.asarray(s_values, dtype=float)
    out = np.zeros((s_values.size, cfg.d))
    starts = np.array([t for t, _ in segments])
    if s_values.size == 0:
        return out
    if np.any(np.diff(s_values) < 0) or s_values[-1] > starts[-1] + 1e-9:
        raise ValueError("queries must be sorted and within the recorded run")
    n_seg = len(segments) - 1
    seg_of = np.minimum(
        np.searchsorted(starts[1:], s_values, side="left"), n_seg - 1
    )
    for k in range(n_seg):
        sel = np.nonzero(seg_of == k)[0]
        if sel.size == 0:
            continue
        cur = segments[k][1]
        for i in sel:
            s = s_values[i]
            if s < 0:
                out[i] = 0.0
                continue
            cur = integration_step(cur, params, max(s, cur.t), basis, cfg)
            out[i] = cur.h[: cfg.d]
    return out
