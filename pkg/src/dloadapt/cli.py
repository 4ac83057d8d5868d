"""Command line: ``dloadapt collect | train | run | gradcheck | probe-jacobian``.

Results are printed as JSON on stdout.  Failures print
``{"error": <category>, "message": ...}`` on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import data, rbfn, scenarios, sim, training
from .control import write_diagnostics
from .errors import ConfigError, DloError, RunAborted
from .gradcheck import check_gradients

EXIT_CODES = {"config": 2, "io": 3, "model-file": 4, "diverged": 5, "dataset": 6}


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


def _emit(obj) -> None:
    print(json.dumps(_jsonable(obj), indent=2, sort_keys=True))


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


# --- subcommands -----------------------------------------------------------

def cmd_collect(args) -> int:
    sc = scenarios.load_scenario(args.scenario)
    state = scenarios.initial_rod(sc)
    ds = data.collect_dataset(state, sc.sim, args.duration, window=args.window, rate=args.rate,
                              workspace=sc.workspace(state), seed=args.seed)
    ds.meta["scenario"] = sc.name
    data.write_csv(ds, args.out)
    _emit({"samples": len(ds), "out": str(args.out), "duration": args.duration, "seed": args.seed})
    return 0


def cmd_train(args) -> int:
    ds = data.read_csv(_require(args.data))
    test = None
    if args.holdout > 0:
        ds, test = ds.split_holdout(args.holdout)
    if args.first is not None:
        ds = ds.first(args.first)
    cfg = training.TrainConfig(q=args.q, beta=args.beta, lr=args.lr, batch_size=args.batch_size,
                               epochs=args.epochs, seed=args.seed, target_feature=args.target_feature)
    result = training.train(ds, cfg)
    rbfn.save(result.net, args.out_model)
    report = {"out_model": str(args.out_model), "samples": len(ds), "final_train_loss": result.history[-1]}
    if test is not None:
        scale = training.Normalization.fit(test).velocity_scale
        report["test_loss"] = training.dataset_loss(result.net, test, args.beta, scale)
        report["untrained_test_loss"] = training.dataset_loss(result.initial_net, test, args.beta, scale)
    if args.history_out:
        Path(args.history_out).write_text("".join(f"{i},{v!r}\n" for i, v in enumerate(result.history)))
    _emit(report)
    return 0


def _run_once(sc, model_path, update, seed, metrics_out=None, diagnostics_out=None):
    net = rbfn.load(_require(model_path), expect=(3, 3, 10))
    result = scenarios.run_scenario(sc, net, update, seed)
    if metrics_out:
        scenarios.write_metrics(result, metrics_out)
    if diagnostics_out:
        write_diagnostics([d for _, d in result.diagnostics], diagnostics_out)
    return result


def cmd_run(args) -> int:
    sc = scenarios.load_scenario(args.scenario)
    model = args.model or sc.model_path
    if not model:
        raise ConfigError("no model given (--model or model= in the scenario file)")
    metrics_out = args.metrics_out or sc.metrics_out
    if args.compare:
        off = _run_once(sc, model, False, args.seed)
        on = _run_once(sc, model, True, args.seed, metrics_out, args.diagnostics_out)
        t_off = [o.time_to_threshold for o in off.outcomes]
        t_on = [o.time_to_threshold for o in on.outcomes]
        _emit({"scenario": sc.name, "without_online_update": off.summary(), "with_online_update": on.summary(),
               "time_to_threshold": {"off": t_off, "on": t_on}})
        return 0 if on.success and off.success else 1
    result = _run_once(sc, model, not args.no_online_update, args.seed, metrics_out, args.diagnostics_out)
    _emit(result.summary())
    if result.aborted is not None:
        raise RunAborted(result.aborted)
    return 0 if result.success else 1


def cmd_gradcheck(args) -> int:
    report = check_gradients(args.configs, args.seed)
    _emit({"configs": report.configs, "entries": report.entries, "max_rel_error": report.max_rel_error,
           "passed": report.passed})
    return 0 if report.passed else 1


def cmd_probe(args) -> int:
    sc = scenarios.load_scenario(args.scenario)
    state = scenarios.initial_rod(sc)
    jac = sim.probe_true_jacobian(state, args.feature, sc.sim, args.h)
    report = {"feature": args.feature, "h": args.h, "jacobian": jac,
              "singular_values": np.linalg.svd(jac, compute_uv=False)}
    if args.model:
        est = rbfn.estimate_jacobian(rbfn.load(_require(args.model)), sim.extract_features(state), args.feature)
        report["estimate"] = est.matrix
    _emit(report)
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dloadapt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="record open-loop exploration data")
    c.add_argument("--duration", type=float, default=300.0, help="seconds of data (300 and 3600 are the presets)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--scenario", default="task1", help="scene to collect in (built-in name or file)")
    c.add_argument("--window", type=float, default=1.0, help="seconds per random waypoint")
    c.add_argument("--rate", type=float, default=50.0, help="sampling rate in Hz")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="fit an RBF network to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out-model", required=True)
    t.add_argument("--q", type=int, default=256)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--target-feature", type=int, default=4)
    t.add_argument("--holdout", type=float, default=0.0, help="seconds at the end kept for testing")
    t.add_argument("--first", type=float, default=None, help="train on the first N seconds only")
    t.add_argument("--history-out", default=None)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run a servo scenario")
    r.add_argument("--scenario", required=True)
    r.add_argument("--model", default=None)
    r.add_argument("--no-online-update", action="store_true")
    r.add_argument("--compare", action="store_true", help="run without and with online updates")
    r.add_argument("--seed", type=int, default=None, help="goal seed (defaults to the scenario's)")
    r.add_argument("--metrics-out", default=None)
    r.add_argument("--diagnostics-out", default=None)
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    g.add_argument("--configs", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    j = sub.add_parser("probe-jacobian", help="finite-difference Jacobian of a feature in a scene")
    j.add_argument("--scenario", default="task1")
    j.add_argument("--feature", type=int, default=4)
    j.add_argument("--h", type=float, default=1e-3)
    j.add_argument("--model", default=None, help="also print this network's estimate")
    j.set_defaults(func=cmd_probe)
    return p


def _fail(category: str, message: str) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and _fail("config", "invalid command line")
    try:
        return args.func(args)
    except DloError as exc:
        return _fail(exc.category, str(exc))
    except FileNotFoundError as exc:
        return _fail("io", str(exc))
    except (ValueError, IndexError) as exc:
        return _fail("config", str(exc))


if __name__ == "__main__":
    sys.exit(main())
