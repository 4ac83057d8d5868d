"""Open-loop exploration data and the CSV dataset format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim
from .errors import DatasetError, SimulationDiverged

DIFF_WINDOW = 5  # moving-average length applied after central differencing


@dataclass(frozen=True)
class TrainingSample:
    phi: np.ndarray
    rdot: np.ndarray
    xdot: np.ndarray  # (m, l)
    timestamp: float


@dataclass
class Dataset:
    t: np.ndarray
    phi: np.ndarray
    rdot: np.ndarray
    xdot: np.ndarray
    gripper: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> TrainingSample:
        return TrainingSample(self.phi[i], self.rdot[i], self.xdot[i], float(self.t[i]))

    @property
    def m(self) -> int:
        return self.xdot.shape[1]

    @property
    def l(self) -> int:
        return self.xdot.shape[2]

    @property
    def n(self) -> int:
        return self.rdot.shape[1]

    def select(self, mask) -> "Dataset":
        return Dataset(self.t[mask], self.phi[mask], self.rdot[mask], self.xdot[mask],
                       None if self.gripper is None else self.gripper[mask], dict(self.meta))

    def first(self, seconds: float) -> "Dataset":
        return self.select(self.t < self.t[0] + seconds - 1e-9)

    def split_holdout(self, seconds: float = 60.0) -> tuple["Dataset", "Dataset"]:
        """Train on everything but the final ``seconds`` of trajectory, test on that."""
        cut = self.t[-1] - seconds
        return self.select(self.t <= cut), self.select(self.t > cut)


def differentiate(positions: np.ndarray, rate: float, window: int = DIFF_WINDOW) -> tuple[np.ndarray, int]:
    """Central differences followed by a centred moving average along axis 0.

    Returns the velocities and the number of samples lost at each end.
    """
    central = (positions[2:] - positions[:-2]) * (rate / 2.0)
    kernel_sum = np.cumsum(np.concatenate([np.zeros((1,) + central.shape[1:]), central]), axis=0)
    smoothed = (kernel_sum[window:] - kernel_sum[:-window]) / window
    return smoothed, 1 + (window - 1) // 2


def minimum_jerk_velocity(start, goal, duration: float, tau) -> np.ndarray:
    s = np.clip(np.asarray(tau, dtype=float) / duration, 0.0, 1.0)
    shape = 30 * s**2 - 60 * s**3 + 30 * s**4
    return np.multiply.outer(shape, (np.asarray(goal) - np.asarray(start)) / duration)


def default_workspace(state: sim.RodState, side: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    centre = state.gripper.copy()
    return centre - side / 2, centre + side / 2


def collect_dataset(
    state: sim.RodState,
    cfg: sim.SimConfig,
    duration: float,
    window: float = 1.0,
    rate: float = 50.0,
    workspace: tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
    m: int = 10,
) -> Dataset:
    """Drive the gripper through random waypoints and record shapes and velocities.

    Every ``window`` seconds a waypoint is drawn uniformly in ``workspace`` and
    the gripper follows a minimum-jerk profile to it.  Velocity knots are the
    profile sampled at ``rate``; between knots the velocity is linear and each
    simulator step uses its mean over the step, so the recorded gripper
    velocity integrates by the trapezoid rule to the recorded displacement.
    """
    per_sample = cfg.dt * rate
    steps = int(round(1.0 / per_sample))
    if not math.isclose(steps * per_sample, 1.0, rel_tol=1e-9):
        raise ValueError("simulator dt must divide the sampling interval")
    knots_per_window = int(round(window * rate))
    if not math.isclose(knots_per_window / rate, window, rel_tol=1e-9):
        raise ValueError("window must be a whole number of sampling intervals")
    lo, hi = workspace if workspace is not None else default_workspace(state)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    rng = np.random.default_rng(seed)
    n_windows = int(round(duration / window))
    total = n_windows * knots_per_window + 1

    state = state.copy()
    state.time = 0.0
    idx = sim.feature_indices(len(state.positions), m)
    feats = np.empty((total, m, 3))
    grip = np.empty((total, 3))
    rdot = np.zeros((total, 3))
    step_frac = (np.arange(steps) + 0.5) / steps

    feats[0] = state.positions[idx]
    grip[0] = state.gripper
    k = 0
    try:
        for _ in range(n_windows):
            goal = rng.uniform(lo, hi)
            knots = minimum_jerk_velocity(state.gripper.copy(), goal, window,
                                          np.arange(knots_per_window + 1) / rate)
            for j in range(knots_per_window):
                for frac in step_frac:
                    u = knots[j] + (knots[j + 1] - knots[j]) * frac
                    sim._advance_inplace(state, u, cfg)
                k += 1
                rdot[k] = knots[j + 1]
                feats[k] = state.positions[idx]
                grip[k] = state.gripper
    except SimulationDiverged as exc:
        partial = _finish(feats[:k + 1], grip[:k + 1], rdot[:k + 1], rate, {})
        raise DatasetError(f"simulation diverged after {k / rate:.2f} s: {exc}", partial) from exc

    meta = {
        "seed": seed,
        "duration": duration,
        "window": window,
        "rate": rate,
        "m": m,
        "workspace_lo": " ".join(repr(float(v)) for v in lo),
        "workspace_hi": " ".join(repr(float(v)) for v in hi),
    }
    meta.update({f"sim.{k}": v for k, v in dataclasses.asdict(cfg).items()})
    return _finish(feats, grip, rdot, rate, meta)


def _finish(feats, grip, rdot, rate, meta) -> Dataset:
    xdot, trim = differentiate(feats, rate)
    keep = slice(trim, len(feats) - trim)
    t = np.arange(len(feats))[keep] / rate
    phi = feats[keep].reshape(len(t), -1)
    return Dataset(t, phi, rdot[keep], xdot, grip[keep], meta)


# --- CSV -------------------------------------------------------------------

def _header(l: int, n: int, m: int) -> list[str]:
    cols = ["t"] + [f"phi_{k}" for k in range(l * m)] + [f"rdot_{k}" for k in range(n)]
    cols += [f"xdot_{i}_{j}" for i in range(m) for j in range(l)]
    return cols


def write_csv(data: Dataset, path) -> None:
    path = Path(path)
    table = np.column_stack([data.t, data.phi, data.rdot, data.xdot.reshape(len(data), -1)])
    with path.open("w", newline="\n") as fh:
        fh.write(",".join(_header(data.l, data.n, data.m)) + "\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")
    meta_path = path.with_name(path.name + ".meta")
    meta_path.write_text("".join(f"{k}={v}\n" for k, v in sorted(data.meta.items())))


def read_csv(path, l: int = 3, n: int = 3) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    n_phi = sum(c.startswith("phi_") for c in header)
    m = n_phi // l
    if header != _header(l, n, m):
        raise DatasetError(f"{path}: unexpected CSV header")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = {}
    meta_path = path.with_name(path.name + ".meta")
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                meta[key] = value
    c = 1 + l * m
    return Dataset(table[:, 0], table[:, 1:c], table[:, c:c + n],
                   table[:, c + n:].reshape(len(table), m, l), None, meta)
