"""Scenario files and the three servo tasks.

A scenario is an INI file (``key = value`` sections) describing the rod scene,
the controller and one or more targets.  Built-in scenarios ``task1``,
``task2`` and ``task3`` ship with the package; any other name is read as a
path.  Goals are defined by demonstration: the gripper is moved by an offset
from the starting scene, the rod settles, and the target feature's position
becomes the goal.  That guarantees every goal is reachable.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import sim
from .control import ControllerConfig, FixedPoint, LoopDiagnostics, RodPlant, TimedPath, run_closed_loop
from .errors import ConfigError, RunAborted
from .rbfn import RbfNetwork

SCENARIO_VERSION = 1
BUILTIN = ("task1", "task2", "task3")


@dataclass
class TargetSpec:
    feature: int
    kind: str = "fixed"
    goal: np.ndarray | None = None
    gripper_offset: np.ndarray | None = None
    offset_range: tuple[float, float] | None = None
    offset_axes: np.ndarray = field(default_factory=lambda: np.ones(3))
    times: np.ndarray | None = None
    waypoints: np.ndarray | None = None  # relative to the feature's start position


@dataclass
class Scenario:
    name: str
    sim: sim.SimConfig
    targets: list[TargetSpec]
    controller: ControllerConfig
    anchor: np.ndarray
    gripper: np.ndarray
    bow: np.ndarray
    settle_time: float = 3.0
    horizon: float = 60.0
    success_threshold: float = 0.005
    success_hold: float = 1.0
    stop_on_success: bool = True
    nail_after_success: bool = False
    seed: int = 0
    demo_time: float = 2.0
    demo_settle: float = 3.0
    workspace_half: np.ndarray = field(default_factory=lambda: np.full(3, 0.15))
    model_path: str | None = None
    metrics_out: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def features(self) -> list[int]:
        return [t.feature for t in self.targets]

    def workspace(self, state: sim.RodState) -> tuple[np.ndarray, np.ndarray]:
        return state.gripper - self.workspace_half, state.gripper + self.workspace_half


# --- parsing ----------------------------------------------------------------

def _vec(text: str, size: int | None = None) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.replace(",", " ").split()])
    except ValueError as exc:
        raise ConfigError(f"not a list of numbers: {text!r}") from exc
    if size is not None and len(v) != size:
        raise ConfigError(f"expected {size} numbers, got {text!r}")
    return v


def _rows(text: str, width: int = 3) -> np.ndarray:
    return np.array([_vec(row, width) for row in text.split(";") if row.strip()])


def _sim_config(section) -> sim.SimConfig:
    kw = {}
    for f in dataclasses.fields(sim.SimConfig):
        if f.name not in section:
            continue
        raw = section[f.name].strip()
        if f.name == "gravity":
            kw[f.name] = tuple(_vec(raw, 3))
        elif f.name == "table_plane":
            kw[f.name] = None if raw.lower() in ("", "none") else float(raw)
        elif f.name == "particle_count":
            kw[f.name] = int(raw)
        else:
            kw[f.name] = float(raw)
    unknown = set(section) - {f.name for f in dataclasses.fields(sim.SimConfig)}
    if unknown:
        raise ConfigError(f"unknown [sim] keys: {sorted(unknown)}")
    return sim.SimConfig(**kw)


_CONTROLLER_KEYS = {
    "kp", "gain", "lam", "sigma_trunc", "update_enabled", "dt", "input_mask", "length_unit",
    "update_scheme", "velocity_estimator", "divergence_bound", "identity_bound", "identity_warmup",
}


def _controller(section) -> ControllerConfig:
    unknown = set(section) - _CONTROLLER_KEYS
    if unknown:
        raise ConfigError(f"unknown [controller] keys: {sorted(unknown)}")
    kw = {}
    for key in ("lam", "sigma_trunc", "dt", "length_unit", "divergence_bound", "identity_warmup"):
        if key in section:
            kw[key] = section.getfloat(key)
    if "kp" in section:
        kw["kp"] = _vec(section["kp"])
    if "gain" in section:
        g = _vec(section["gain"])
        kw["gain"] = float(g[0]) if len(g) == 1 else g
    if "update_enabled" in section:
        kw["update_enabled"] = section.getboolean("update_enabled")
    if "input_mask" in section:
        kw["input_mask"] = _vec(section["input_mask"], 3) != 0
    for key in ("update_scheme", "velocity_estimator"):
        if key in section:
            kw[key] = section[key].strip()
    if section.get("identity_bound", "").strip().lower() not in ("", "none"):
        kw["identity_bound"] = section.getfloat("identity_bound")
    return ControllerConfig(**kw)


def _target(name: str, section) -> TargetSpec:
    try:
        feature = int(name.split(".", 1)[1])
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"target sections are named [target.<feature>], got [{name}]") from exc
    kind = section.get("kind", "fixed").strip()
    spec = TargetSpec(feature, kind)
    if kind == "fixed":
        given = [k for k in ("goal", "gripper_offset", "random_offset") if k in section]
        if len(given) != 1:
            raise ConfigError(f"[{name}] needs exactly one of goal, gripper_offset, random_offset")
        if "goal" in section:
            spec.goal = _vec(section["goal"], 3)
        elif "gripper_offset" in section:
            spec.gripper_offset = _vec(section["gripper_offset"], 3)
        else:
            lo, hi = _vec(section["random_offset"], 2)
            if not 0 < lo <= hi:
                raise ConfigError(f"[{name}] random_offset must satisfy 0 < lo <= hi")
            spec.offset_range = (float(lo), float(hi))
        if "offset_axes" in section:
            spec.offset_axes = _vec(section["offset_axes"], 3)
    elif kind == "path":
        spec.times = _vec(section["times"])
        spec.waypoints = _rows(section["waypoints"])
        if len(spec.times) != len(spec.waypoints) or len(spec.times) < 2:
            raise ConfigError(f"[{name}] needs matching times and waypoints (at least two)")
        if np.any(np.diff(spec.times) <= 0):
            raise ConfigError(f"[{name}] path times must increase")
    else:
        raise ConfigError(f"[{name}] unknown target kind {kind!r}")
    return spec


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if "scenario" not in cp:
        raise ConfigError(f"{source}: missing [scenario] section")
    head = cp["scenario"]
    try:
        version = head.getint("version", SCENARIO_VERSION)
        if version != SCENARIO_VERSION:
            raise ConfigError(f"{source}: scenario version {version}, expected {SCENARIO_VERSION}")
        order = [int(x) for x in head.get("targets", "").split()]
        sections = {int(s.split(".", 1)[1]): _target(s, cp[s]) for s in cp.sections() if s.startswith("target.")}
        if not order:
            order = sorted(sections)
        if len(set(order)) != len(order):
            raise ConfigError(f"{source}: targets must be distinct")
        missing = [k for k in order if k not in sections]
        if missing:
            raise ConfigError(f"{source}: no [target.<k>] section for {missing}")
        simcfg = _sim_config(cp["sim"]) if "sim" in cp else sim.SimConfig()
        ctrl = _controller(cp["controller"]) if "controller" in cp else ControllerConfig()
        rod = cp["rod"] if "rod" in cp else {}
        data = cp["data"] if "data" in cp else {}
        sc = Scenario(
            name=head.get("name", Path(source).stem),
            sim=simcfg,
            targets=[sections[k] for k in order],
            controller=ctrl,
            anchor=_vec(rod.get("anchor", "0 0 0"), 3),
            gripper=_vec(rod.get("gripper", "0.3 0 0"), 3),
            bow=_vec(rod.get("bow", "0 0 -1"), 3),
            settle_time=float(rod.get("settle_time", 3.0)),
            horizon=head.getfloat("horizon", 60.0),
            success_threshold=head.getfloat("success_threshold", 0.005),
            success_hold=head.getfloat("success_hold", 1.0),
            stop_on_success=head.getboolean("stop_on_success", True),
            nail_after_success=head.getboolean("nail_after_success", False),
            seed=head.getint("seed", 0),
            demo_time=head.getfloat("demo_time", 2.0),
            demo_settle=head.getfloat("demo_settle", 3.0),
            workspace_half=_vec(data.get("workspace_half", "0.15 0.15 0.15"), 3),
            model_path=head.get("model") or None,
            metrics_out=head.get("metrics_out") or None,
            extras={k: v for k, v in head.items() if k.startswith("x_")},
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for t in sc.targets:
        if not 0 <= t.feature < 10:
            raise ConfigError(f"{source}: target feature {t.feature} outside [0, 10)")
    return sc


def builtin_text(name: str) -> str:
    return resources.files("dloadapt").joinpath("scenarios").joinpath(f"{name}.ini").read_text()


def load_scenario(name_or_path: str) -> Scenario:
    if name_or_path in BUILTIN:
        return parse_scenario(builtin_text(name_or_path), f"{name_or_path}.ini")
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"unknown scenario {name_or_path!r} (built-ins: {', '.join(BUILTIN)})")
    return parse_scenario(path.read_text(), str(path))


# --- scene and goals -------------------------------------------------------

def initial_rod(sc: Scenario) -> sim.RodState:
    return sim.initial_state(sc.sim, sc.anchor, sc.gripper, sc.bow, sc.settle_time)


def random_offset(rng: np.random.Generator, lo: float, hi: float, axes=np.ones(3)) -> np.ndarray:
    d = rng.normal(size=3) * np.asarray(axes, dtype=float)
    return d * rng.uniform(lo, hi) / np.linalg.norm(d)


def demonstrate(state: sim.RodState, offset, sc: Scenario) -> sim.RodState:
    """Move the gripper by ``offset`` at constant speed, then let the rod settle."""
    steps = int(round(sc.demo_time / sc.sim.dt))
    moved = sim.advance(state, np.asarray(offset, dtype=float) / (steps * sc.sim.dt), sc.sim, steps)
    return sim.settle(moved, sc.sim, sc.demo_settle)


def references(sc: Scenario, state: sim.RodState, seed: int | None = None) -> list:
    """Reference callables for every target, in run order.

    Fixed goals given as offsets are demonstrated in sequence: each
    demonstration starts where the previous one ended and, when targets are
    nailed after success, with the previous targets nailed.
    """
    rng = np.random.default_rng(sc.seed if seed is None else seed)
    out = []
    demo = state
    for spec in sc.targets:
        start = sim.feature_position(demo, spec.feature)
        if spec.kind == "path":
            out.append(TimedPath(spec.times, start + spec.waypoints))
            continue
        if spec.goal is not None:
            goal = spec.goal.copy()
        else:
            offset = spec.gripper_offset
            if offset is None:
                offset = random_offset(rng, *spec.offset_range, spec.offset_axes)
            demo = demonstrate(demo, offset, sc)
            goal = sim.feature_position(demo, spec.feature)
            if sc.nail_after_success:
                demo = sim.nail_feature(demo, spec.feature)
        out.append(FixedPoint(goal))
    return out


# --- running ---------------------------------------------------------------

@dataclass
class TargetOutcome:
    feature: int
    reached: bool
    time_to_threshold: float  # from the target's start; inf if never held
    t_start: float
    t_end: float
    goal: np.ndarray
    mean_error: float = math.nan  # mean task error norm over the target's ticks
    max_error: float = math.nan


@dataclass
class ScenarioResult:
    name: str
    outcomes: list[TargetOutcome]
    diagnostics: list[tuple[int, LoopDiagnostics]]
    aborted: str | None = None

    @property
    def success(self) -> bool:
        return self.aborted is None and all(o.reached for o in self.outcomes)

    def summary(self) -> dict:
        return {
            "scenario": self.name,
            "success": self.success,
            "aborted": self.aborted,
            "targets": [
                {"feature": o.feature, "reached": o.reached, "time_to_threshold": o.time_to_threshold,
                 "t_start": o.t_start, "t_end": o.t_end, "mean_error": o.mean_error, "max_error": o.max_error}
                for o in self.outcomes
            ],
        }


def hold_start(t: np.ndarray, dy: np.ndarray, threshold: float, hold: float, dt: float) -> float:
    """First time from which ``dy`` stays below ``threshold`` for ``hold`` seconds."""
    n = int(round(hold / dt))
    below = dy < threshold
    run = 0
    for k, ok in enumerate(below):
        run = run + 1 if ok else 0
        if run > n:
            return float(t[k - n])
    return math.inf


def run_scenario(sc: Scenario, net: RbfNetwork, update_enabled: bool | None = None,
                 seed: int | None = None, state: sim.RodState | None = None) -> ScenarioResult:
    """Run every target of ``sc`` in order on a fresh copy of the scene.

    ``net`` is adapted in place when online updates are enabled.
    """
    state = initial_rod(sc) if state is None else state
    refs = references(sc, state, seed)
    plant = RodPlant(state, sc.sim, net.m)
    ctrl = sc.controller if update_enabled is None else dataclasses.replace(sc.controller, update_enabled=update_enabled)
    dt = ctrl.dt
    need = int(round(sc.success_hold / dt)) + 1
    thr = sc.success_threshold

    def held(diags):
        return len(diags) >= need and all(d.dy_norm < thr for d in diags[-need:])

    tagged: list[tuple[int, LoopDiagnostics]] = []
    outcomes: list[TargetOutcome] = []
    aborted = None
    for spec, ref in zip(sc.targets, refs):
        remaining = sc.horizon - plant.time
        t0 = plant.time
        sink: list[LoopDiagnostics] = []
        cfg = dataclasses.replace(ctrl, target_feature=spec.feature)
        goal = ref(math.inf)[0]
        if remaining < dt / 2:
            outcomes.append(TargetOutcome(spec.feature, False, math.inf, t0, t0, goal))
            continue
        try:
            run_closed_loop(plant, net, cfg, ref, remaining, stop=held if sc.stop_on_success else None, sink=sink)
        except RunAborted as exc:
            aborted = str(exc)
        tagged.extend((spec.feature, d) for d in sink)
        t = np.array([d.t for d in sink]) - t0
        dy = np.array([d.dy_norm for d in sink])
        if spec.kind == "path":
            reached = aborted is None and len(sink) >= need and bool(np.all(dy[-need:] < thr))
            ttt = hold_start(t, dy, thr, sc.success_hold, dt) if reached else math.inf
        else:
            ttt = hold_start(t, dy, thr, sc.success_hold, dt)
            reached = aborted is None and math.isfinite(ttt)
        stats = (float(dy.mean()), float(dy.max())) if len(dy) else (math.nan, math.nan)
        outcomes.append(TargetOutcome(spec.feature, reached, ttt, t0, plant.time, goal, *stats))
        if aborted is not None or not reached:
            break
        if sc.nail_after_success:
            plant.nail(spec.feature)
    for spec in sc.targets[len(outcomes):]:
        outcomes.append(TargetOutcome(spec.feature, False, math.inf, plant.time, plant.time, np.full(3, np.nan)))
    return ScenarioResult(sc.name, outcomes, tagged, aborted)


def write_metrics(result: ScenarioResult, path, n: int = 3) -> None:
    """Per-tick metrics: target feature, positions, errors, input, rank and V_task."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "target"] + [f"y_{j}" for j in range(3)] + [f"yd_{j}" for j in range(3)]
                   + ["dy_norm", "ew_norm"] + [f"u_{i}" for i in range(n)] + ["rank", "V_task"])
        for feature, d in result.diagnostics:
            w.writerow([repr(float(d.t)), feature] + [repr(float(x)) for x in d.y]
                       + [repr(float(x)) for x in d.y_desired] + [repr(d.dy_norm), repr(d.ew_norm)]
                       + [repr(float(x)) for x in d.u] + [d.rank, repr(d.v_task)])
