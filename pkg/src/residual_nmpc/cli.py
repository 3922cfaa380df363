"""Command-line entry point: ``residual-nmpc <command> [options]``.

Commands operate on an output directory and pick up each other's artifacts:

    gen-ref   reference CSVs                  refs/ref_XX.csv, refs.json
    collect   nominal flights, residual data  runs/, dataset*.csv, split.json
    train     per-axis sparse GPs             model.json, model_{x,y,z}.json, elbo_report.json
    evaluate  RMSE with/without correction    rmse_{with,without}_obstacles.json
    run       one closed-loop flight          run.csv, run_summary.json, run.png
    sweep     inducing-point sweep            sweep.csv, sweep.json, sweep.png

Exit codes: 1 configuration or usage, 2 data, 3 solver.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from residual_nmpc.config import ExperimentConfig, default_config, load_config, save_config
from residual_nmpc.data import (
    ResidualDataset,
    collect,
    nominal_and_augmented_errors,
    sweep_inducing_points,
    train_models,
    write_sweep_csv,
)
from residual_nmpc.errors import ConfigError, DataError, ResidualNmpcError
from residual_nmpc.experiments import (
    empty_world,
    fly,
    fly_all,
    make_references,
    path_world,
    record_problems,
    split_ids,
    time_solves,
)
from residual_nmpc.gp.sparse import SgpModelSet
from residual_nmpc.planner.reference import ReferenceTrajectory

log = logging.getLogger("residual_nmpc")

THREADS_ENV = "RESIDUAL_NMPC_THREADS"
SCENARIOS = {True: "with_obstacles", False: "without_obstacles"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def workers_from_env() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"missing input {path}; run the upstream command first")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None


class Context:
    """Resolved config, output directory and shared loaders for one command."""

    def __init__(self, cfg: ExperimentConfig, out: Path, debug_solver: bool):
        self.cfg = cfg
        self.out = out
        self.hash = cfg.hash
        self.debug_solver = debug_solver
        self.workers = workers_from_env()
        out.mkdir(parents=True, exist_ok=True)

    def stamp(self, doc: dict) -> dict:
        return {"config_hash": self.hash, **doc}

    def debug_stream(self, name: str):
        return open(self.out / f"{name}_solver_debug.jsonl", "w") if self.debug_solver else None

    def references(self) -> list[ReferenceTrajectory]:
        idx = read_json(self.out / "refs.json")
        return [ReferenceTrajectory.from_csv(self.out / f) for f in idx["files"]]

    def split(self) -> dict:
        return read_json(self.out / "split.json")

    def dataset(self, name: str) -> ResidualDataset:
        return ResidualDataset.from_csv(self.out / name)

    def model(self) -> SgpModelSet:
        return SgpModelSet.from_dict(read_json(self.out / "model.json"))


def cmd_gen_ref(ctx: Context, args) -> int:
    refs = make_references(ctx.cfg)
    d = ctx.out / "refs"
    d.mkdir(exist_ok=True)
    files = []
    for i, ref in enumerate(refs):
        name = f"refs/ref_{i:02d}.csv"
        ref.to_csv(ctx.out / name)
        files.append(name)
    write_json(
        ctx.out / "refs.json",
        ctx.stamp({"count": len(refs), "files": files, "samples": [len(r) for r in refs], "dt": ctx.cfg.reference.dt}),
    )
    save_config(ctx.cfg, ctx.out / "config.json")
    print(f"wrote {len(refs)} reference(s) to {d}")
    return 0


def cmd_collect(ctx: Context, args) -> int:
    refs = ctx.references()
    ids = list(range(len(refs)))
    with _maybe(ctx.debug_stream("collect")) as dbg:
        logs = fly_all(ctx.cfg, refs, ids, obstacles=bool(args.obstacles), debug_stream=dbg, workers=ctx.workers)
    (ctx.out / "runs").mkdir(exist_ok=True)
    for i, lg in zip(ids, logs):
        lg.to_csv(ctx.out / f"runs/collect_{i:02d}.csv")
    ds = collect(logs)
    ds.to_csv(ctx.out / "dataset.csv")
    train_ids, test_ids = split_ids(len(refs), ctx.cfg.run.train_fraction, ctx.cfg.seed)
    mask = np.isin(ds.traj_id, train_ids)
    ds.subset(mask).to_csv(ctx.out / "dataset_train.csv")
    ds.subset(~mask).to_csv(ctx.out / "dataset_test.csv")
    write_json(ctx.out / "split.json", ctx.stamp({"train": train_ids, "test": test_ids}))
    write_json(
        ctx.out / "collect.json",
        ctx.stamp(
            {
                "rows": ds.n,
                "train_rows": int(mask.sum()),
                "test_rows": int((~mask).sum()),
                "scenario": SCENARIOS[bool(args.obstacles)],
                "runs": [lg.summary() for lg in logs],
            }
        ),
    )
    print(f"collected {ds.n} rows from {len(logs)} flights ({int(mask.sum())} train / {int((~mask).sum())} test)")
    return 0


def cmd_train(ctx: Context, args) -> int:
    from residual_nmpc.plotting import plot_training

    train = ctx.dataset("dataset_train.csv")
    s = ctx.cfg.sgp
    model, reports = train_models(train, s.m, s.bias, s.hyp_init, seed=ctx.cfg.seed, max_iter=s.max_iter)
    doc = model.to_dict()
    write_json(ctx.out / "model.json", ctx.stamp(doc))
    for j, axis in enumerate("xyz"):
        write_json(ctx.out / f"model_{axis}.json", ctx.stamp({"axis": axis, **model.axes[j].to_dict()}))
    write_json(
        ctx.out / "elbo_report.json",
        ctx.stamp({"axes": {a: r.to_dict() for a, r in zip("xyz", reports)}, "n_train": train.n, "m": s.m}),
    )
    plot_training(train, model, reports, ctx.out / "train.png")
    print(f"trained {s.m}-point sparse GPs on {train.n} rows; ELBO " + ", ".join(f"{r.elbo:.1f}" for r in reports))
    return 0


def cmd_evaluate(ctx: Context, args) -> int:
    from residual_nmpc.plotting import plot_evaluation

    model = ctx.model()
    scenario = SCENARIOS[bool(args.obstacles)]
    if args.obstacles:
        refs = ctx.references()
        test_ids = ctx.split()["test"]
        with _maybe(ctx.debug_stream("evaluate")) as dbg:
            logs = fly_all(ctx.cfg, refs, test_ids, obstacles=True, debug_stream=dbg, workers=ctx.workers)
        (ctx.out / "runs").mkdir(exist_ok=True)
        for i, lg in zip(test_ids, logs):
            lg.to_csv(ctx.out / f"runs/evaluate_obstacles_{i:02d}.csv")
        test = collect(logs)
        test.to_csv(ctx.out / "dataset_test_obstacles.csv")
        extra = {"runs": [lg.summary() for lg in logs]}
    else:
        test = ctx.dataset("dataset_test.csv")
        extra = {}
    report = nominal_and_augmented_errors(test, model, scenario)
    write_json(ctx.out / f"rmse_{scenario}.json", ctx.stamp({**report.to_dict(), **extra}))
    plot_evaluation(test, model, report, ctx.out / f"evaluate_{scenario}.png")
    print(f"{scenario}: nominal RMSE {report.nominal_rmse:.4f} m/s, augmented RMSE {report.augmented_rmse:.4f} m/s")
    return 0


def cmd_run(ctx: Context, args) -> int:
    from residual_nmpc.plotting import plot_run

    refs = ctx.references()
    if not 0 <= args.traj < len(refs):
        raise DataError(f"--traj {args.traj} out of range (have {len(refs)} references)")
    ref = refs[args.traj]
    world = path_world(ctx.cfg, ref, seed=ctx.cfg.seed * 1000 + args.traj) if args.obstacles else empty_world(ctx.cfg, ref)
    model = None
    if args.model:
        model = SgpModelSet.from_dict(read_json(Path(args.model)))
    with _maybe(ctx.debug_stream("run")) as dbg:
        lg = fly(ctx.cfg, ref, world, model, debug_stream=dbg)
    lg.to_csv(ctx.out / "run.csv")
    write_json(ctx.out / "run_world.json", ctx.stamp(world.to_dict()))
    summary = lg.summary()
    summary["min_clearance_ok"] = bool(lg.min_clearance >= ctx.cfg.world.d_o - 1e-2)
    summary["model"] = args.model
    summary["scenario"] = SCENARIOS[bool(args.obstacles)]
    write_json(ctx.out / "run_summary.json", ctx.stamp(summary))
    plot_run(lg, world, ref, ctx.out / "run.png", d_o=ctx.cfg.world.d_o)
    print(f"run: {lg.termination} after {len(lg)} steps, position RMSE {lg.position_rmse():.3f} m")
    return 0


def cmd_sweep(ctx: Context, args) -> int:
    from residual_nmpc.plotting import plot_sweep

    train = ctx.dataset("dataset_train.csv")
    test = ctx.dataset("dataset_test.csv")
    refs = ctx.references()
    sw = ctx.cfg.sweep
    ref = refs[ctx.split()["test"][0]]
    world = path_world(ctx.cfg, ref, seed=ctx.cfg.seed * 1000) if args.obstacles else empty_world(ctx.cfg, ref)
    problems = record_problems(ctx.cfg, ref, world, sw.solves)

    def timing(models):
        return time_solves(ctx.cfg, problems, models, repeats=sw.repeats)

    table = sweep_inducing_points(train, test, sw.m_values, ctx.cfg.sgp.hyp_init, ctx.cfg.sgp.bias, timing, seeds=sw.seeds)
    write_sweep_csv(table, ctx.out / "sweep.csv")
    write_json(ctx.out / "sweep.json", ctx.stamp({"table": table}))
    plot_sweep(table, ctx.out / "sweep.png")
    for r in table:
        print(f"m={r['m']:3d}  rmse {r['augmented_rmse']:.4f}  median solve {1e3 * r['median_solve_time']:.2f} ms")
    return 0


class _maybe:
    """Context manager that closes an optional stream."""

    def __init__(self, fh):
        self.fh = fh

    def __enter__(self):
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()


COMMANDS = {
    "gen-ref": (cmd_gen_ref, "generate reference trajectories"),
    "collect": (cmd_collect, "fly the references with the nominal planner and build residual datasets"),
    "train": (cmd_train, "train per-axis sparse GPs on the training split"),
    "evaluate": (cmd_evaluate, "report nominal and augmented velocity RMSE on held-out flights"),
    "run": (cmd_run, "fly one closed-loop run and plot it"),
    "sweep": (cmd_sweep, "sweep the number of inducing points"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: built-in defaults)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: the config out field)")
    common.add_argument("--debug-solver", action="store_true", help="write per-iteration NMPC records as JSON lines")
    common.add_argument("-v", "--verbose", action="store_true")
    obs = common.add_mutually_exclusive_group()
    obs.add_argument("--obstacles", dest="obstacles", action="store_true", default=None, help="fly with obstacles placed along the path")
    obs.add_argument("--no-obstacles", dest="obstacles", action="store_false", help="fly in empty space")

    p = _Parser(prog="residual-nmpc", description="Residual-dynamics learning for an NMPC quadrotor planner.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "run":
            sp.add_argument("--traj", type=int, default=0, help="reference index (default 0)")
            sp.add_argument("--model", help="model JSON for the augmented planner (default: nominal)")
    return p


# scenario default when neither flag is given
_OBSTACLE_DEFAULT = {"gen-ref": False, "collect": False, "train": False, "evaluate": False, "run": True, "sweep": False}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.obstacles is None:
        args.obstacles = _OBSTACLE_DEFAULT[args.command]
    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out if args.out else cfg.out)
        ctx = Context(cfg, out, args.debug_solver)
        fn, _ = COMMANDS[args.command]
        return fn(ctx, args)
    except ResidualNmpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
