"""Command-line entry point: gen-data, train, predict, eval, render.

Log verbosity comes from the TRAJPRED_LOG environment variable (DEBUG, INFO,
WARNING, ...). Exit status is 0 on success, 2 on bad input and 1 on any other
failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import CostParams, file_header, load_params
from .costs import LAYERS, ContextSnapshot, render_cost_map
from .evaluation import CASES, run_case, write_case
from .fixtures import BUILDERS, load_fixture
from .geometry import DEFAULT_CELL, GeometryError, Region, context_region
from .interpreter import NoFeasiblePolicy
from .policy_net import (Dataset, TrainConfig, build_dataset, infer, load_dataset, load_model,
                         save_dataset, save_model, train, window_features)
from .predictor import (H_DEFAULT, N_DEFAULT, InsufficientHistory, _constant_velocity_pose,
                        build_context, predict, prepare, target_history)
from .scenario import Scenario, ScenarioError, agent_pose_at, load_scenario
from .simulator import maneuver_pack

log = logging.getLogger("trajpred")


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("TRAJPRED_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _scenario(arg: str) -> Scenario:
    """A scenario file path, or the name of a bundled fixture."""
    p = Path(arg)
    if p.exists():
        return load_scenario(p)
    if arg in BUILDERS:
        return load_fixture(arg)
    raise UsageError(f"no scenario file or bundled fixture named {arg!r}")


def _params(arg: str | None) -> CostParams:
    return load_params(arg)


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    if args.scenarios:
        files = sorted(Path(args.scenarios).glob("*.json"))
        if not files:
            raise UsageError(f"no scenario files in {args.scenarios}")
        tracks = []
        for f in files:
            sc = load_scenario(f)
            tracks.extend(a for a in sc.agents if a.kind == "vehicle")
        source = {"scenarios": [f.name for f in files]}
    else:
        pack = maneuver_pack(args.tracks_per_kind, args.seed)
        tracks = [a for _, a in pack]
        source = {"maneuver_pack": {"tracks_per_kind": args.tracks_per_kind}}
    log.info("seed %d, %d tracks", args.seed, len(tracks))
    meta = {"header": file_header(), "seed": args.seed, "source": source}
    ds = build_dataset(tracks, args.t_obs, args.t_pred, args.stride, meta=meta)
    save_dataset(ds, args.out)
    print(f"{len(ds)} windows written to {args.out}")
    for slug, count in ds.histogram().items():
        print(f"{slug:>18} {count}")
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    ds: Dataset = load_dataset(args.data)
    config = TrainConfig(epochs=args.epochs, hidden=args.hidden, batch_size=args.batch_size,
                         lr=args.lr, val_fraction=args.val_fraction)
    log.info("seed %d", args.seed)
    print("epoch,train_loss,train_acc,val_loss,val_acc,seconds")

    def report(m):
        print(f"{m.epoch},{m.train_loss:.6f},{m.train_acc:.6f},{m.val_loss:.6f},"
              f"{m.val_acc:.6f},{m.seconds:.2f}", flush=True)

    model, _ = train(ds, config, args.seed, callback=report)
    model.meta["header"] = file_header()
    save_model(model, args.out)
    print(f"model written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# predict

def cmd_predict(args) -> int:
    scenario = _scenario(args.scenario)
    params = _params(args.params)
    model = load_model(args.model)
    target = scenario.player_id if args.target is None else args.target
    scenario.agent(target)
    result = predict(scenario, model, target, args.t, params=params, n=args.n, h=args.h)
    text = result.to_record(params, timings=args.timings)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for w in sorted(result.warnings):
        log.warning("agent %s at t=%.2f: %s", target, args.t, w)
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    params = _params(args.params)
    model = load_model(args.model)
    names = list(CASES) if args.case == "all" else [args.case]
    for name in names:
        result = run_case(name, model, params, n=args.n, h=args.h, lambda_a=args.lambda_a)
        paths = write_case(result, args.out, params)
        summary = result.summary()
        print(f"{name}: {len(result.times)} frames, {len(result.events)} events")
        for m, s in summary.items():
            print(f"  {m:>18} ending_rmse {s['ending_rmse']:.3f} "
                  f"mean_instantaneous {s['mean_instantaneous']:.3f}")
        log.info("wrote %s", ", ".join(str(p) for p in paths))
    return 0


# ---------------------------------------------------------------------------
# render

def _parse_region(text: str) -> Region:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad region {text!r}; expected xmin,ymin,xmax,ymax") from None
    if len(vals) != 4:
        raise UsageError(f"bad region {text!r}; expected xmin,ymin,xmax,ymax")
    try:
        return Region(*vals)
    except GeometryError as exc:
        raise UsageError(str(exc)) from None


def render_context(scenario: Scenario, t: float, region: Region, cell_size: float,
                   params: CostParams, target: int | None, model=None,
                   n: int = N_DEFAULT, h: float = H_DEFAULT) -> ContextSnapshot:
    """Context seen by `target` at time t.

    Every other agent present contributes its constant-velocity prediction.
    Without a target that has enough history and a feasible policy there is no
    reference line, so the speed part of the context layer stays empty.
    """
    present = [a.id for a in scenario.agents if a.t_start - 1e-9 <= t <= a.t_end + 1e-9]
    mo = [_constant_velocity_pose(agent_pose_at(scenario, k, t), n, h)
          for k in present if k != target]
    if target is not None and model is not None:
        try:
            history = target_history(scenario, target, t, model.t_obs)
            probs = infer(model, window_features(history))
            chosen, _, _ = prepare(scenario, target, t, probs, history, None, params, n, h,
                                   cell_size)
            return build_context(scenario, t, region, chosen.reference, chosen.desired_speed,
                                 mo, h, cell_size)
        except (InsufficientHistory, NoFeasiblePolicy, GeometryError) as exc:
            log.warning("rendering without a reference line: %s", exc)
    return build_context(scenario, t, region, None, np.zeros(0), mo, h, cell_size)


def cmd_render(args) -> int:
    scenario = _scenario(args.scenario)
    params = _params(args.params)
    target = args.target
    if target is None and scenario.agents:
        target = scenario.player_id
    if args.region:
        region = _parse_region(args.region)
    elif target is not None:
        region = context_region(agent_pose_at(scenario, target, args.t))
    else:
        raise UsageError("--region is required when the scenario has no agents")
    model = load_model(args.model) if target is not None else None
    ctx = render_context(scenario, args.t, region, args.cell_size, params, target, model)
    grid = render_cost_map(ctx, params, region, args.cell_size, scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = file_header(params)
    for layer in LAYERS:
        path = out / f"{layer}.csv"
        path.write_text(grid.to_csv(layer, header), encoding="utf-8")
        print(f"{layer}: max {float(np.max(grid.layers[layer])):.6g} -> {path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajpred", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"trajpred {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="label sliding windows of scripted tracks")
    p.add_argument("--scenarios", help="directory of scenario files; default: the maneuver pack")
    p.add_argument("--out", required=True)
    p.add_argument("--t-obs", type=int, default=40)
    p.add_argument("--t-pred", type=int, default=40)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--tracks-per-kind", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the policy classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--hidden", type=int, default=TrainConfig.hidden)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--val-fraction", type=float, default=TrainConfig.val_fraction)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="one prediction round for one agent")
    p.add_argument("--scenario", required=True, help="scenario file or bundled fixture name")
    p.add_argument("--model", help="model file; default: the bundled model")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--target", type=int, help="agent id; default: the player")
    p.add_argument("--params", help="parameter file; default: the bundled parameters")
    p.add_argument("--out", help="output record; default: stdout")
    p.add_argument("--n", type=int, default=N_DEFAULT)
    p.add_argument("--h", type=float, default=H_DEFAULT)
    p.add_argument("--timings", action="store_true", help="include wall times in the record")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="replay a case and score all methods")
    p.add_argument("--case", required=True, choices=[*CASES, "all"])
    p.add_argument("--model")
    p.add_argument("--params")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=N_DEFAULT)
    p.add_argument("--h", type=float, default=H_DEFAULT)
    p.add_argument("--lambda-a", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write the cost-map layers as CSV")
    p.add_argument("--scenario", required=True)
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--region", help="xmin,ymin,xmax,ymax; default: the target's context region")
    p.add_argument("--cell-size", type=float, default=DEFAULT_CELL)
    p.add_argument("--target", type=int)
    p.add_argument("--model")
    p.add_argument("--params")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ScenarioError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"trajpred {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"trajpred {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
