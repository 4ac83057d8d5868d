"""Mass-spring-damper rod standing in for a deformable linear object.

The rod is a chain of point masses.  Adjacent particles are joined by
stretch springs with viscous dashpots; every interior particle is tied by a
zero-rest-length bending spring to the midpoint of its two neighbours, which
gives a bending energy quadratic in the discrete curvature.  Particle 0 is
anchored for the whole run, the last particle is carried kinematically by
the end effector, and any other particle can be nailed to the world.

Integration is semi-implicit (symplectic) Euler with a fixed internal
substep; one call to :func:`step` advances ``cfg.dt`` seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.optimize import brentq

from .errors import SimulationDiverged, UnsupportedOperation

__all__ = [
    "SimConfig",
    "RodState",
    "feature_indices",
    "initial_state",
    "step",
    "advance",
    "extract_features",
    "feature_position",
    "nail_feature",
    "unnail_feature",
    "settle",
    "probe_true_jacobian",
    "total_energy",
]


@dataclass(frozen=True)
class SimConfig:
    particle_count: int = 40
    rod_length: float = 0.5
    stretch_stiffness: float = 1000.0
    bend_stiffness: float = 950.0
    damping: float = 0.016
    internal_damping: float = 0.2
    particle_mass: float = 0.001
    dt: float = 0.005
    substep_dt: float = 2.5e-4
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    table_plane: float | None = None
    settle_time: float = 0.5

    def __post_init__(self):
        if self.particle_count < 3:
            raise ValueError("particle_count must be at least 3")
        if not (self.dt > 0 and self.substep_dt > 0):
            raise ValueError("dt and substep_dt must be positive")
        if self.stretch_stiffness <= 0 or self.bend_stiffness <= 0:
            raise ValueError("stiffnesses must be positive")
        if self.damping < 0 or self.internal_damping < 0 or self.particle_mass <= 0:
            raise ValueError("damping must be non-negative and mass positive")
        # symplectic Euler on the stiffest mode needs h * omega < 2
        if self.substep_dt * self.max_frequency > 1.5:
            raise ValueError(
                f"substep_dt={self.substep_dt:g} too large for stiffness; "
                f"need <= {1.5 / self.max_frequency:.3g}"
            )

    @property
    def max_frequency(self) -> float:
        return math.sqrt((4 * self.stretch_stiffness + 16 * self.bend_stiffness) / self.particle_mass)

    @property
    def substeps(self) -> int:
        return max(1, math.ceil(self.dt / self.substep_dt - 1e-9))

    @property
    def segment_length(self) -> float:
        return self.rod_length / (self.particle_count - 1)


@dataclass
class RodState:
    positions: np.ndarray
    velocities: np.ndarray
    rest_lengths: np.ndarray
    nailed: frozenset[int] = field(default_factory=frozenset)
    anchor_index: int = 0
    gripper_index: int = -1
    time: float = 0.0

    def __post_init__(self):
        if self.gripper_index < 0:
            self.gripper_index = len(self.positions) + self.gripper_index

    @property
    def gripper(self) -> np.ndarray:
        return self.positions[self.gripper_index]

    @property
    def fixed(self) -> frozenset[int]:
        return self.nailed | {self.anchor_index}

    def copy(self) -> "RodState":
        return replace(
            self,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            rest_lengths=self.rest_lengths.copy(),
        )


def feature_indices(particle_count: int, m: int) -> np.ndarray:
    """Particle indices of ``m`` features equally spaced by arc length, endpoints excluded."""
    if m > particle_count - 2:
        raise ValueError(f"cannot place {m} interior features on {particle_count} particles")
    k = np.arange(1, m + 1)
    return np.rint(k * (particle_count - 1) / (m + 1)).astype(int)


@njit(cache=True)
def _forces(x, v, rest, ks, kb, c, ci, mass, g, f):
    n = x.shape[0]
    for i in range(n):
        for a in range(3):
            f[i, a] = mass * g[a] - c * v[i, a]
    for s in range(n - 1):
        e0 = x[s + 1, 0] - x[s, 0]
        e1 = x[s + 1, 1] - x[s, 1]
        e2 = x[s + 1, 2] - x[s, 2]
        length = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
        inv = 1.0 / length
        e0 *= inv
        e1 *= inv
        e2 *= inv
        dv = (v[s + 1, 0] - v[s, 0]) * e0 + (v[s + 1, 1] - v[s, 1]) * e1 + (v[s + 1, 2] - v[s, 2]) * e2
        mag = ks * (length - rest[s]) + ci * dv
        f[s, 0] += mag * e0
        f[s, 1] += mag * e1
        f[s, 2] += mag * e2
        f[s + 1, 0] -= mag * e0
        f[s + 1, 1] -= mag * e1
        f[s + 1, 2] -= mag * e2
    for i in range(1, n - 1):
        for a in range(3):
            d = x[i - 1, a] - 2.0 * x[i, a] + x[i + 1, a]
            f[i - 1, a] -= kb * d
            f[i, a] += 2.0 * kb * d
            f[i + 1, a] -= kb * d


@njit(cache=True)
def _integrate(x, v, rest, fixed, grip, grip_end, u, h, substeps,
               ks, kb, c, ci, mass, g, has_table, table):
    n = x.shape[0]
    f = np.empty_like(x)
    start = x[grip].copy()
    inv_m = 1.0 / mass
    for k in range(substeps):
        _forces(x, v, rest, ks, kb, c, ci, mass, g, f)
        for i in range(n):
            if fixed[i] or i == grip:
                continue
            for a in range(3):
                v[i, a] += h * f[i, a] * inv_m
                x[i, a] += h * v[i, a]
            if has_table and x[i, 2] < table:
                x[i, 2] = table
                v[i, 2] = 0.0
        frac = (k + 1) / substeps
        for a in range(3):
            v[grip, a] = u[a]
            x[grip, a] = start[a] + (grip_end[a] - start[a]) * frac
    for a in range(3):
        x[grip, a] = grip_end[a]


def _kernel_args(cfg: SimConfig):
    return (
        cfg.stretch_stiffness,
        cfg.bend_stiffness,
        cfg.damping,
        cfg.internal_damping,
        cfg.particle_mass,
        np.asarray(cfg.gravity, dtype=float),
        cfg.table_plane is not None,
        0.0 if cfg.table_plane is None else float(cfg.table_plane),
    )


def _advance_inplace(state: RodState, u: np.ndarray, cfg: SimConfig, steps: int = 1) -> None:
    fixed = np.zeros(len(state.positions), dtype=np.bool_)
    fixed[list(state.fixed)] = True
    ks, kb, c, ci, mass, g, has_table, table = _kernel_args(cfg)
    h = cfg.dt / cfg.substeps
    for _ in range(steps):
        grip_end = state.positions[state.gripper_index] + u * cfg.dt
        _integrate(state.positions, state.velocities, state.rest_lengths, fixed,
                   state.gripper_index, grip_end, u, h, cfg.substeps,
                   ks, kb, c, ci, mass, g, has_table, table)
        state.time += cfg.dt
    bad = ~np.isfinite(state.positions).all(axis=1) | ~np.isfinite(state.velocities).all(axis=1)
    if bad.any():
        raise SimulationDiverged(int(np.flatnonzero(bad)[0]))


def step(state: RodState, gripper_velocity, cfg: SimConfig) -> RodState:
    """Advance one ``cfg.dt`` with the gripper moving at ``gripper_velocity``."""
    u = np.asarray(gripper_velocity, dtype=float)
    if u.shape != (3,) or not np.isfinite(u).all():
        raise ValueError("gripper_velocity must be a finite 3-vector")
    out = state.copy()
    _advance_inplace(out, u, cfg)
    return out


def advance(state: RodState, gripper_velocity, cfg: SimConfig, steps: int) -> RodState:
    """``steps`` consecutive calls of :func:`step` with a constant input."""
    u = np.asarray(gripper_velocity, dtype=float)
    if u.shape != (3,) or not np.isfinite(u).all():
        raise ValueError("gripper_velocity must be a finite 3-vector")
    out = state.copy()
    _advance_inplace(out, u, cfg, steps)
    return out


def settle(state: RodState, cfg: SimConfig, duration: float | None = None) -> RodState:
    duration = cfg.settle_time if duration is None else duration
    return advance(state, np.zeros(3), cfg, int(round(duration / cfg.dt)))


def _arc_points(p0, p1, length, count, bow):
    chord_vec = p1 - p0
    chord = np.linalg.norm(chord_vec)
    ex = chord_vec / chord
    ey = bow - np.dot(bow, ex) * ex
    ey /= np.linalg.norm(ey)
    ratio = chord / length
    if ratio >= 1.0 - 1e-12:
        return p0 + np.outer(np.linspace(0.0, 1.0, count), chord_vec)
    # half-angle alpha of a circular arc with sin(alpha)/alpha = chord/length
    alpha = brentq(lambda a: math.sin(a) / a - ratio, 1e-9, math.pi - 1e-9)
    radius = length / (2 * alpha)
    mid = p0 + 0.5 * chord_vec
    centre = mid - ey * radius * math.cos(alpha)
    angles = np.linspace(-alpha, alpha, count)
    return centre + radius * (np.outer(np.sin(angles), ex) + np.outer(np.cos(angles), ey))


def initial_state(
    cfg: SimConfig,
    anchor=(0.0, 0.0, 0.0),
    gripper=(0.3, 0.0, 0.0),
    bow=(0.0, 0.0, -1.0),
    settle_time: float = 3.0,
) -> RodState:
    """Rod laid on a circular arc from anchor to gripper, then settled with zero input.

    ``bow`` is the direction the slack bulges towards before settling.
    """
    p0 = np.asarray(anchor, dtype=float)
    p1 = np.asarray(gripper, dtype=float)
    if np.linalg.norm(p1 - p0) > cfg.rod_length:
        raise ValueError("anchor and gripper farther apart than the rod length")
    pos = _arc_points(p0, p1, cfg.rod_length, cfg.particle_count, np.asarray(bow, dtype=float))
    if cfg.table_plane is not None:
        pos[:, 2] = np.maximum(pos[:, 2], cfg.table_plane)
    state = RodState(
        positions=pos,
        velocities=np.zeros_like(pos),
        rest_lengths=np.full(cfg.particle_count - 1, cfg.segment_length),
    )
    if settle_time > 0:
        state = settle(state, cfg, settle_time)
        state.time = 0.0
    return state


def extract_features(state: RodState, m: int = 10) -> np.ndarray:
    """Stacked positions of ``m`` evenly spaced features, anchor side first."""
    idx = feature_indices(len(state.positions), m)
    return state.positions[idx].reshape(-1).copy()


def feature_position(state: RodState, feature: int, m: int = 10) -> np.ndarray:
    return state.positions[feature_indices(len(state.positions), m)[feature]].copy()


def nail_feature(state: RodState, feature_index: int, m: int = 10) -> RodState:
    """Pin a feature to the world at its current position.  Nailing twice is a no-op."""
    if not 0 <= feature_index < m:
        raise IndexError(f"feature_index {feature_index} outside [0, {m})")
    particle = int(feature_indices(len(state.positions), m)[feature_index])
    out = state.copy()
    out.nailed = state.nailed | {particle}
    out.velocities[particle] = 0.0
    return out


def unnail_feature(state: RodState, feature_index: int, m: int = 10) -> RodState:
    raise UnsupportedOperation("nails cannot be removed once placed")


def total_energy(state: RodState, cfg: SimConfig) -> float:
    """Kinetic plus elastic energy (gravity excluded)."""
    x, v = state.positions, state.velocities
    free = np.ones(len(x), dtype=bool)
    free[list(state.fixed)] = False
    kinetic = 0.5 * cfg.particle_mass * float(np.sum(v[free] ** 2))
    seg = np.linalg.norm(np.diff(x, axis=0), axis=1)
    stretch = 0.5 * cfg.stretch_stiffness * float(np.sum((seg - state.rest_lengths) ** 2))
    d = x[:-2] - 2 * x[1:-1] + x[2:]
    bend = 0.5 * cfg.bend_stiffness * float(np.sum(d * d))
    return kinetic + stretch + bend


def probe_true_jacobian(
    state: RodState,
    target: int,
    cfg: SimConfig,
    h: float = 1e-3,
    m: int = 10,
    settle_time: float | None = None,
) -> np.ndarray:
    """Central-difference quasi-static Jacobian of feature ``target`` w.r.t. the gripper.

    Each column displaces the gripper by +-h along one axis, lets the rod
    settle with the gripper held still, and differences the feature
    position.  The input state is not modified.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    settle_time = cfg.settle_time if settle_time is None else settle_time
    idx = feature_indices(len(state.positions), m)[target]
    jac = np.empty((3, 3))
    for k in range(3):
        ends = []
        for sign in (1.0, -1.0):
            probe = state.copy()
            probe.positions[probe.gripper_index, k] += sign * h
            probe.velocities[:] = 0.0
            probe = settle(probe, cfg, settle_time)
            ends.append(probe.positions[idx])
        jac[:, k] = (ends[0] - ends[1]) / (2 * h)
    return jac
