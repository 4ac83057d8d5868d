"""Adaptive servo controller with online RBF weight adaptation.

Control input: ``u = pinv(J_hat) (yd_dot - Kp dy)`` with small singular
values discarded.  Online law for row ``j`` of column block ``i`` of the
target head::

    w_ij <- w_ij + dt * rdot_i * L_i theta(phi) * (dy_j + lam * ew_j)

where ``ew = ydot_measured - J_hat rdot``.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import sim
from .errors import ErrorDynamicsViolation, RunAborted
from .rbfn import TARGET, RbfNetwork, activations, estimate_jacobian

__all__ = [
    "ControllerConfig",
    "LoopDiagnostics",
    "RunResult",
    "FixedPoint",
    "TimedPath",
    "RodPlant",
    "SyntheticPlant",
    "truncated_pinv",
    "control_law",
    "update_weights",
    "run_closed_loop",
    "lyapunov_value",
    "write_diagnostics",
]


@dataclass
class ControllerConfig:
    kp: np.ndarray = field(default_factory=lambda: np.full(3, 0.2))
    gain: float | np.ndarray = 20.0
    lam: float = 10.0
    sigma_trunc: float = 1e-3
    target_feature: int = 4
    update_enabled: bool = True
    dt: float = 0.02
    input_mask: np.ndarray | None = None
    length_unit: float = 1.0
    update_scheme: str = "exact"
    velocity_estimator: str = "filtered"
    divergence_bound: float = 0.5
    identity_bound: float | None = None  # m/s^2; residual limit is 10 * bound * dt
    identity_warmup: float = 1.0  # s after the start of a run before the check is armed

    def __post_init__(self):
        self.kp = np.atleast_1d(np.asarray(self.kp, dtype=float))
        if np.any(self.kp <= 0):
            raise ValueError("Kp entries must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.sigma_trunc < 0:
            raise ValueError("sigma_trunc must be non-negative")
        if self.dt <= 0 or self.length_unit <= 0:
            raise ValueError("dt and length_unit must be positive")
        if self.update_scheme not in ("exact", "euler"):
            raise ValueError(f"unknown update scheme {self.update_scheme!r}")
        if self.velocity_estimator not in ("filtered", "difference"):
            raise ValueError(f"unknown velocity estimator {self.velocity_estimator!r}")
        if self.input_mask is not None:
            self.input_mask = np.asarray(self.input_mask, dtype=bool)

    def gain_matrices(self, n: int, q: int) -> np.ndarray:
        """``L_i`` for every input channel as an ``(n, q, q)`` array."""
        g = np.asarray(self.gain, dtype=float)
        if g.ndim == 0:
            return np.broadcast_to(g * np.eye(q), (n, q, q))
        if g.ndim == 1:
            return g[:, None, None] * np.eye(q)
        return g


@dataclass
class LoopDiagnostics:
    t: float
    dy: np.ndarray
    ew: np.ndarray
    u: np.ndarray
    rank: int
    v_task: float
    identity_residual: float = math.nan
    y: np.ndarray | None = None
    y_desired: np.ndarray | None = None

    @property
    def dy_norm(self) -> float:
        return float(np.linalg.norm(self.dy))

    @property
    def ew_norm(self) -> float:
        return float(np.linalg.norm(self.ew))


@dataclass
class RunResult:
    diagnostics: list[LoopDiagnostics]
    y: np.ndarray
    y_desired: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return np.array([d.t for d in self.diagnostics])

    @property
    def dy_norm(self) -> np.ndarray:
        return np.array([d.dy_norm for d in self.diagnostics])


# --- references ------------------------------------------------------------

@dataclass
class FixedPoint:
    position: np.ndarray

    def __call__(self, t: float):
        return np.asarray(self.position, dtype=float), np.zeros(len(self.position))


@dataclass
class TimedPath:
    """Piecewise-linear path through ``points`` reached at ``times``; holds the last point."""

    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("path times must increase strictly")

    def __call__(self, t: float):
        if t <= self.times[0]:
            return self.points[0].copy(), np.zeros(self.points.shape[1])
        if t >= self.times[-1]:
            return self.points[-1].copy(), np.zeros(self.points.shape[1])
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        span = self.times[k + 1] - self.times[k]
        rate = (self.points[k + 1] - self.points[k]) / span
        return self.points[k] + rate * (t - self.times[k]), rate


# --- plants ----------------------------------------------------------------

class Plant(Protocol):
    time: float

    def shape(self) -> np.ndarray: ...

    def apply(self, u: np.ndarray, duration: float) -> None: ...


class RodPlant:
    """The rod simulator seen through its feature positions."""

    def __init__(self, state: sim.RodState, cfg: sim.SimConfig, m: int = 10):
        self.state = state.copy()
        self.cfg = cfg
        self.m = m
        self.time = 0.0

    def shape(self) -> np.ndarray:
        return sim.extract_features(self.state, self.m)

    def apply(self, u, duration: float) -> None:
        steps = int(round(duration / self.cfg.dt))
        if not math.isclose(steps * self.cfg.dt, duration, rel_tol=1e-9):
            raise ValueError("controller tick must be a multiple of the simulator step")
        sim._advance_inplace(self.state, np.asarray(u, dtype=float), self.cfg, steps)
        self.time += duration

    def nail(self, feature: int) -> None:
        self.state = sim.nail_feature(self.state, feature, self.m)


class SyntheticPlant:
    """Features move exactly as ``xdot_k = J_k(phi) u`` with ``J_k`` from a known network."""

    def __init__(self, true_net: RbfNetwork, phi0: np.ndarray):
        self.net = true_net
        self.phi = np.asarray(phi0, dtype=float).copy()
        self.time = 0.0

    def shape(self) -> np.ndarray:
        return self.phi.copy()

    def velocity(self, u) -> np.ndarray:
        net = self.net
        theta = activations(net, self.phi)
        blocks = (net.weights[:net.m * net.block] @ theta).reshape(net.m, net.n, net.l)
        return np.einsum("hij,i->hj", blocks, np.asarray(u, dtype=float)).reshape(-1)

    def apply(self, u, duration: float) -> None:
        self.phi = self.phi + duration * self.velocity(u)
        self.time += duration


# --- control law -----------------------------------------------------------

def truncated_pinv(jac: np.ndarray, sigma_trunc: float = 1e-3) -> tuple[np.ndarray, int]:
    """Moore-Penrose inverse keeping singular values above ``sigma_trunc``; also the kept rank."""
    u, s, vt = np.linalg.svd(np.asarray(jac, dtype=float), full_matrices=False)
    keep = s > sigma_trunc
    pinv = (vt[keep].T / s[keep]) @ u[:, keep].T
    return pinv, int(keep.sum())


def control_law(jac, y, y_desired, yd_dot, cfg: ControllerConfig) -> np.ndarray:
    return _control(np.asarray(jac), y, y_desired, yd_dot, cfg)[0]


def _control(jac, y, y_desired, yd_dot, cfg):
    dy = np.asarray(y, dtype=float) - np.asarray(y_desired, dtype=float)
    pinv, rank = truncated_pinv(jac, cfg.sigma_trunc)
    u = pinv @ (np.asarray(yd_dot, dtype=float) - cfg.kp * dy)
    if cfg.input_mask is not None:
        u = np.where(cfg.input_mask, u, 0.0)
    return u, rank, dy


def update_weights(net: RbfNetwork, phi, rdot, dy, ew, cfg: ControllerConfig, dt: float) -> None:
    """Advance the online law by one controller tick on the target head (in place).

    With ``update_scheme="euler"`` this is the explicit Euler step.  With
    ``"exact"`` the law is integrated in closed form over the tick, holding
    ``rdot``, ``theta`` and ``dy`` fixed: ``dy + lam*ew`` then decays at rate
    ``lam * sum_i rdot_i^2 theta' L_i theta``, which scales the Euler step by
    ``(1 - exp(-x)) / x``.  Both agree to first order in ``dt``.
    """
    if not cfg.update_enabled:
        return
    rdot = np.asarray(rdot, dtype=float) / cfg.length_unit
    drive = (np.asarray(dy, dtype=float) + cfg.lam * np.asarray(ew, dtype=float)) / cfg.length_unit
    theta = activations(net, phi)
    ltheta = cfg.gain_matrices(net.n, net.q) @ theta
    step = dt
    if cfg.update_scheme == "exact":
        x = cfg.lam * dt * float(np.sum(rdot**2 * (ltheta @ theta)))
        if x > 1e-12:
            step = dt * -math.expm1(-x) / x
    block = net.head_weights(TARGET)
    l = net.l
    for i in range(net.n):
        if rdot[i] != 0.0:
            block[i * l:(i + 1) * l] += step * rdot[i] * np.outer(drive, ltheta[i])


def lyapunov_value(dy, true_block: np.ndarray, est_block: np.ndarray, cfg: ControllerConfig,
                   l: int = 3) -> float:
    """Task error energy plus the weight-error term ``1/2 sum dw_ij L_i^-1 dw_ij^T``."""
    dw = (np.asarray(true_block) - np.asarray(est_block)) * cfg.length_unit
    n, q = dw.shape[0] // l, dw.shape[1]
    gains = cfg.gain_matrices(n, q)
    total = 0.0
    for i in range(n):
        rows = dw[i * l:(i + 1) * l]
        total += float(np.sum(rows.T * np.linalg.solve(gains[i], rows.T)))
    dy = np.asarray(dy, dtype=float) / cfg.length_unit
    return 0.5 * float(dy @ dy) + 0.5 * total


# --- closed loop -----------------------------------------------------------

class _VelocityMeter:
    """Target velocity from recent shape history, updated once per tick.

    Both estimators are linear filters over per-tick shape increments.  The
    same filter is applied to the predicted velocities ``J_hat @ u`` so that
    the approximation error compares measurement and prediction over the same
    ticks instead of mixing a lagged measurement with the current command.
    """

    def __init__(self, kind: str, window: int = 5):
        self.kind = kind
        if kind == "difference":
            self.kernel = np.ones(1)
        else:
            # central differences averaged over `window` centres, expressed per increment
            k = np.zeros(window + 1)
            k[:-1] += 0.5 / window
            k[1:] += 0.5 / window
            self.kernel = k
        self.increments: deque = deque([None] * len(self.kernel), maxlen=len(self.kernel))
        self.predictions: deque = deque([None] * len(self.kernel), maxlen=len(self.kernel))
        self.last = None

    def push(self, phi, predicted=None):
        phi = np.asarray(phi, dtype=float)
        if self.last is not None:
            self.increments.append(phi - self.last)
            self.predictions.append(predicted)
        self.last = phi

    @staticmethod
    def _filter(kernel, values, scale=1.0):
        total = None
        for w, v in zip(kernel, values):
            if v is not None:
                total = w * v if total is None else total + w * v
        return 0.0 if total is None else total * scale

    def velocity(self, dt: float) -> np.ndarray:
        out = self._filter(self.kernel, self.increments, 1.0 / dt)
        return np.zeros_like(self.last) if np.isscalar(out) else out

    def predicted(self) -> np.ndarray | float:
        return self._filter(self.kernel, self.predictions)


def run_closed_loop(
    plant,
    net: RbfNetwork,
    cfg: ControllerConfig,
    reference: Callable[[float], tuple[np.ndarray, np.ndarray]],
    horizon: float,
    stop: Callable[[list[LoopDiagnostics]], bool] | None = None,
    sink: list | None = None,
    meter: _VelocityMeter | None = None,
    on_tick: Callable | None = None,
) -> RunResult:
    """Servo the target feature along ``reference`` for ``horizon`` seconds.

    Diagnostics are appended to ``sink`` (if given) as they are produced, so
    they survive an abort.  ``stop`` is polled after every tick.
    """
    l = net.l
    net.target_feature = cfg.target_feature
    sl = slice(cfg.target_feature * l, (cfg.target_feature + 1) * l)
    diags: list[LoopDiagnostics] = [] if sink is None else sink
    start = len(diags)
    meter = meter or _VelocityMeter(cfg.velocity_estimator)
    ys, yds = [], []
    phi = plant.shape()
    t_start = plant.time
    meter.push(phi)
    ticks = int(round(horizon / cfg.dt))
    for k in range(ticks):
        t = plant.time
        y = phi[sl]
        yd, yd_dot = reference(t)
        jac = estimate_jacobian(net, phi, TARGET).matrix
        u, rank, dy = _control(jac, y, yd, yd_dot, cfg)
        plant.apply(u, cfg.dt)
        phi_next = plant.shape()
        meter.push(phi_next, jac @ u)
        ydot = meter.velocity(cfg.dt)[sl]
        ew = ydot - meter.predicted()

        residual = math.nan
        if rank == l and cfg.input_mask is None:
            yd_next, _ = reference(t + cfg.dt)
            d_dy = (phi_next[sl] - y - (yd_next - yd)) / cfg.dt
            residual = float(np.linalg.norm(ew - (d_dy + cfg.kp * dy)))

        update_weights(net, phi, u, dy, ew, cfg, cfg.dt)
        diag = LoopDiagnostics(t, dy, ew, u, rank, 0.5 * float(dy @ dy), residual, y.copy(), np.asarray(yd).copy())
        diags.append(diag)
        ys.append(y)
        yds.append(yd)
        if on_tick is not None:
            on_tick(k, diag)
        phi = phi_next

        if not np.isfinite(dy).all() or diag.dy_norm > cfg.divergence_bound:
            raise RunAborted(f"task error {diag.dy_norm:.3g} m exceeded bound at t={t:.2f}s", diags)
        armed = cfg.identity_bound is not None and t - t_start >= cfg.identity_warmup
        if armed and residual > 10 * cfg.identity_bound * cfg.dt:
            raise ErrorDynamicsViolation(
                f"error-dynamics residual {residual:.3g} above {10 * cfg.identity_bound * cfg.dt:.3g} at t={t:.2f}s",
                diags,
            )
        if stop is not None and stop(diags[start:]):
            break
    return RunResult(diags[start:], np.array(ys), np.array(yds))


def write_diagnostics(diags: list[LoopDiagnostics], path, n: int = 3) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "dy_norm", "ew_norm"] + [f"u_{i}" for i in range(n)] + ["rank", "V_task"])
        for d in diags:
            w.writerow([repr(float(d.t)), repr(d.dy_norm), repr(d.ew_norm)]
                       + [repr(float(x)) for x in d.u] + [d.rank, repr(d.v_task)])
