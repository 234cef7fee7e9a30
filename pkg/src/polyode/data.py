"""Synthetic dataset generators, irregular sampling, and dataset I/O.

Three generator families: a univariate product-of-sinusoids signal, the
Lorenz system (two of three coordinates kept), and a five-variable Lorenz96
system (four of five kept).  Dense trajectories live on a uniform
10001-point grid over [0, t_max]; observation times come from a homogeneous
Poisson process and values are read off the grid by nearest-point lookup.
Labels are computed from the unnormalized dense trajectory, reading the
dropped coordinate for the chaotic systems.

Every random draw comes from a stream keyed by (seed, trajectory_id), so
parallel and serial generation agree byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np

from .model import TimeSeries

__all__ = [
    "DatasetSpec",
    "Bundle",
    "simulate_trajectory",
    "sample_irregular",
    "label",
    "normalize_and_split",
    "generate",
    "write_bundle",
    "read_bundle",
]

GRID_POINTS = 10001

KINDS = ("synthetic_univariate", "lorenz63", "lorenz96")

# classic chaotic-regime parameters
LORENZ63_SIGMA, LORENZ63_RHO, LORENZ63_BETA = 10.0, 28.0, 8.0 / 3.0
LORENZ96_FORCING = 8.0
LORENZ96_DIM = 5
_BURN_IN_STEPS = 500
_SIM_DT = 0.01


@dataclass
class DatasetSpec:
    kind: str
    n_series: int
    lam: float
    t_max: float = 10.0
    seed: int = 0
    split: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n_series < 1:
            raise ValueError("need at least one series")
        if self.lam <= 0:
            raise ValueError("sampling rate must be positive")
        if self.t_max <= 0:
            raise ValueError("horizon must be positive")
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("split fractions must be nonnegative and sum to 1")

    @property
    def d(self) -> int:
        return {"synthetic_univariate": 1, "lorenz63": 2, "lorenz96": 4}[self.kind]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_series": self.n_series,
            "lam": self.lam,
            "t_max": self.t_max,
            "seed": self.seed,
            "split": list(self.split),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["split"] = tuple(d["split"])
        return cls(**d)


@dataclass
class DenseTrajectory:
    """Full-state dense trajectory plus the kept-dimension view."""

    kind: str
    times: np.ndarray
    full: np.ndarray
    kept: tuple = field(default=())

    @property
    def visible(self) -> np.ndarray:
        return self.full[:, list(self.kept)]

    def at_time(self, t: float) -> np.ndarray:
        return self.full[_nearest_index(self.times, t)]


def _nearest_index(grid: np.ndarray, t) -> np.ndarray | int:
    dt = grid[1] - grid[0]
    idx = np.rint(np.asarray(t) / dt).astype(int)
    return np.clip(idx, 0, grid.size - 1)


def _lorenz63_rhs(u: np.ndarray) -> np.ndarray:
    x, y, z = u
    return np.array(
        [
            LORENZ63_SIGMA * (y - x),
            x * (LORENZ63_RHO - z) - y,
            x * y - LORENZ63_BETA * z,
        ]
    )


def _lorenz96_rhs(u: np.ndarray) -> np.ndarray:
    return (np.roll(u, -1) - np.roll(u, 2)) * np.roll(u, 1) - u + LORENZ96_FORCING


def _rk4_path(rhs, u0: np.ndarray, n_steps: int, dt: float, burn_in: int) -> np.ndarray:
    u = np.asarray(u0, dtype=float)
    for _ in range(burn_in):
        u = _rk4_step(rhs, u, dt)
    out = np.empty((n_steps + 1, u.size))
    out[0] = u
    for i in range(n_steps):
        u = _rk4_step(rhs, u, dt)
        out[i + 1] = u
    return out


def _rk4_step(rhs, u, dt):
    k1 = rhs(u)
    k2 = rhs(u + 0.5 * dt * k1)
    k3 = rhs(u + 0.5 * dt * k2)
    k4 = rhs(u + dt * k3)
    return u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_trajectory(kind: str, seed, t_max: float = 10.0) -> DenseTrajectory:
    """Dense trajectory on a uniform grid over [0, t_max].

    ``seed`` may be an int or a tuple of ints (per-trajectory stream).  The
    chaotic systems are integrated with RK4 at dt=0.01 for 10000 steps after
    a 500-step burn-in, then the time axis is relabeled to [0, t_max].
    """
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, t_max, GRID_POINTS)
    if kind == "synthetic_univariate":
        # phase drawn with standard deviation 2*pi (the signal is 2*pi
        # periodic in the phase, so sd-vs-variance is immaterial)
        phase = rng.normal(0.0, 2.0 * np.pi)
        x = np.sin(times + phase) * np.cos(3.0 * (times + phase))
        return DenseTrajectory(kind, times, x[:, None], kept=(0,))
    if kind == "lorenz63":
        u0 = rng.uniform(-10.0, 10.0, size=3)
        full = _rk4_path(_lorenz63_rhs, u0, GRID_POINTS - 1, _SIM_DT, _BURN_IN_STEPS)
        return DenseTrajectory(kind, times, full, kept=(0, 1))
    if kind == "lorenz96":
        u0 = LORENZ96_FORCING + rng.uniform(-1.0, 1.0, size=LORENZ96_DIM)
        full = _rk4_path(_lorenz96_rhs, u0, GRID_POINTS - 1, _SIM_DT, _BURN_IN_STEPS)
        return DenseTrajectory(kind, times, full, kept=(0, 1, 2, 3))
    raise ValueError(f"unknown dataset kind {kind!r}")


def sample_irregular(
    traj: DenseTrajectory, lam: float, rng: np.random.Generator, t_max: float | None = None
) -> TimeSeries:
    """Observe the trajectory at homogeneous-Poisson times on (0, t_max].

    Inter-arrival gaps are exponential with rate lam; draws with no arrival
    before t_max are redrawn so every series has at least one observation.
    All visible dimensions are observed at each sampled time.
    """
    if lam <= 0:
        raise ValueError("sampling rate must be positive")
    horizon = traj.times[-1] if t_max is None else t_max
    while True:
        n_cap = max(16, int(8 * lam * horizon + 16))
        gaps = rng.exponential(1.0 / lam, size=n_cap)
        times = np.cumsum(gaps)
        times = times[times <= horizon]
        if times.size:
            break
    values = traj.visible[_nearest_index(traj.times, times)]
    return TimeSeries(times, values, np.ones_like(values))


_LABEL_TIME = {"synthetic_univariate": 5.0, "lorenz63": 6.0, "lorenz96": 6.0}
_LABEL_DIM = {"synthetic_univariate": 0, "lorenz63": 2, "lorenz96": 4}
_LABEL_THRESHOLD = {"synthetic_univariate": 0.5, "lorenz63": 0.0, "lorenz96": 0.0}


def label(kind: str, traj: DenseTrajectory) -> int:
    """Binary label from the unnormalized dense trajectory.

    Strict inequality against the threshold; the chaotic systems read the
    dropped coordinate, so the label is never computable from the visible
    dimensions alone.
    """
    value = traj.at_time(_LABEL_TIME[kind])[_LABEL_DIM[kind]]
    return int(value > _LABEL_THRESHOLD[kind])


@dataclass
class Bundle:
    """Normalized sequences plus split indices and normalization stats."""

    spec: DatasetSpec
    sequences: list
    splits: dict
    norm: dict

    def split(self, name: str) -> list:
        return [self.sequences[i] for i in self.splits[name]]


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split fractions leave a negative count")
    return n_train, n_val, n_test


def normalize_and_split(series_list, spec: DatasetSpec) -> Bundle:
    """Seeded shuffle split, then per-dimension z-scoring with train stats.

    Test and validation values are normalized with the training mean and
    standard deviation only, so there is no leakage.
    """
    if not series_list:
        raise ValueError("empty series list")
    n = len(series_list)
    order = np.random.default_rng((spec.seed, 0xA11CE)).permutation(n)
    n_train, n_val, _ = _split_counts(n, spec.split)
    splits = {
        "train": [int(i) for i in order[:n_train]],
        "val": [int(i) for i in order[n_train : n_train + n_val]],
        "test": [int(i) for i in order[n_train + n_val :]],
    }
    d = series_list[0].d
    obs = [[] for _ in range(d)]
    for i in splits["train"]:
        ts = series_list[i]
        for j in range(d):
            sel = ts.mask[:, j] > 0
            obs[j].append(ts.values[sel, j])
    mean = np.zeros(d)
    std = np.zeros(d)
    for j in range(d):
        vals = np.concatenate(obs[j]) if obs[j] else np.array([])
        if vals.size == 0:
            raise ValueError(f"dimension {j} has no observed training values")
        mean[j] = vals.mean()
        std[j] = vals.std()
        if std[j] < 1e-12:
            raise ValueError(f"dimension {j} has zero variance in the training split")
    normalized = [
        TimeSeries(ts.times, (ts.values - mean) / std, ts.mask, ts.label)
        for ts in series_list
    ]
    norm = {"mean": mean.tolist(), "std": std.tolist()}
    return Bundle(spec=spec, sequences=normalized, splits=splits, norm=norm)


def _make_one(args) -> TimeSeries:
    spec_dict, i = args
    spec = DatasetSpec.from_dict(spec_dict)
    traj = simulate_trajectory(spec.kind, (spec.seed, i, 0), t_max=spec.t_max)
    rng = np.random.default_rng((spec.seed, i, 1))
    ts = sample_irregular(traj, spec.lam, rng, t_max=spec.t_max)
    ts.label = label(spec.kind, traj)
    return ts


def generate(spec: DatasetSpec, workers: int = 1) -> Bundle:
    """Simulate, sample, label, and normalize a full dataset bundle."""
    args = [(spec.to_dict(), i) for i in range(spec.n_series)]
    if workers > 1:
        with Pool(workers) as pool:
            series = pool.map(_make_one, args, chunksize=16)
    else:
        series = [_make_one(a) for a in args]
    return normalize_and_split(series, spec)


def write_bundle(bundle: Bundle, out_dir: str) -> None:
    """Write dataset.jsonl (one record per sequence) and meta.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "dataset.jsonl"), "w") as fh:
        for i, ts in enumerate(bundle.sequences):
            rec = {
                "id": i,
                "times": ts.times.tolist(),
                "values": ts.values.tolist(),
                "mask": ts.mask.astype(int).tolist(),
                "label": int(ts.label) if ts.label is not None else None,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {
        "spec": bundle.spec.to_dict(),
        "norm": bundle.norm,
        "splits": bundle.splits,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_bundle(in_dir: str) -> Bundle:
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    sequences = []
    with open(os.path.join(in_dir, "dataset.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            sequences.append(
                TimeSeries(
                    np.array(rec["times"]),
                    np.array(rec["values"]),
                    np.array(rec["mask"], dtype=float),
                    rec["label"],
                )
            )
    return Bundle(
        spec=DatasetSpec.from_dict(meta["spec"]),
        sequences=sequences,
        splits={k: list(v) for k, v in meta["splits"].items()},
        norm=meta["norm"],
    )
