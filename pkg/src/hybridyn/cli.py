"""Command line: ``hybridyn <subcommand> [--config FILE] [--set key=value ...]``.

Each stage writes into ``<output_dir>/<stage>-<key>``, where the key hashes
the config values the stage reads plus the key of its upstream stage, so a
downstream stage finds its inputs from the config alone. Every stage writes
``manifest.json`` listing config, seeds, versions and SHA-256 of inputs and
outputs; there are no timestamps, so reruns give identical manifests.

Exit codes: 0 success, 2 config error, 3 upstream artifact missing,
4 task failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, pipeline
from ._backend import BACKEND
from .config import config_hash, documented_keys, load_config
from .dynamics import LossParams
from .errors import ContractError, MissingArtifact, RankDeficientError, TaskFailure, TrackingDivergence
from .learn import HybridModel, HyperSpace, coordinate_grid_search, evaluate_models, format_report
from .observer import observe
from .plant import TrajectoryLog
from .planner import bundled_benchmark, load_benchmark, report_table

# config values each stage reads (dotted paths) and the stage it builds on
STAGES = {
    "gen-data": (("seed", "robot", "plant", "trajgen", "learn.test_seeds"), None),
    "identify": (("learn.train_samples",), "gen-data"),
    "train": (("learn.window_len", "learn.compositions", "learn.normalize", "learn.gbt"), "identify"),
    "grid-search": (("learn.window_len", "learn.normalize", "learn.train_fraction", "learn.grid", "learn.gbt"),
                    "identify"),
    "eval": (("learn.test_slice",), "train"),
    "observe": (("observer",), "train"),
    "wrench-train": (("observer", "learn.gbt"), "train"),
    "peg": (("seed", "sensor", "peg"), None),
    "wipe": (("seed", "sensor", "wipe", "plant.sample_period"), None),
    "plan": (("planner", "trajgen.v_max", "trajgen.a_max", "plant.sample_period", "seed"), "train"),
}

HELP = {
    "gen-data": "simulate the training run and the held-out test runs",
    "identify": "fit joint loss parameters (rotor inertia, viscous, Coulomb)",
    "train": "train the model rows listed in learn.compositions",
    "grid-search": "coordinate grid search over learn.grid on a block validation split",
    "eval": "RMSE statistics of the trained models on the test runs",
    "observe": "stream a contact run through the external-torque observer",
    "wrench-train": "train and score the learned F_Z/M_X/M_Y maps",
    "peg": "seeded peg-in-hole episodes with the virtual sensor",
    "wipe": "constant-force wiping on the simulated surface",
    "plan": "reward-driven speed optimisation of the trajectory benchmark",
}

# sections whose keys are listed under each subcommand's --help
HELP_SECTIONS = {
    "gen-data": ("seed", "output_dir", "robot", "plant", "trajgen", "learn"),
    "identify": ("seed", "output_dir", "robot", "plant", "trajgen", "learn"),
    "train": ("seed", "output_dir", "robot", "plant", "trajgen", "learn"),
    "grid-search": ("seed", "output_dir", "robot", "plant", "trajgen", "learn"),
    "eval": ("seed", "output_dir", "robot", "plant", "trajgen", "learn"),
    "observe": ("seed", "output_dir", "robot", "plant", "trajgen", "learn", "observer"),
    "wrench-train": ("seed", "output_dir", "robot", "plant", "trajgen", "learn", "observer"),
    "peg": ("seed", "output_dir", "robot", "sensor", "peg"),
    "wipe": ("seed", "output_dir", "robot", "plant", "sensor", "wipe"),
    "plan": ("seed", "output_dir", "robot", "plant", "trajgen", "learn", "planner"),
}


def _get(cfg, dotted):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def stage_key(cfg: dict, stage: str) -> str:
    keys, upstream = STAGES[stage]
    payload = {"stage": stage, "values": {k: _get(cfg, k) for k in keys},
               "upstream": stage_key(cfg, upstream) if upstream else None}
    return _digest(payload)[:12]


def stage_dir(cfg: dict, stage: str) -> Path:
    return Path(cfg["output_dir"]) / f"{stage}-{stage_key(cfg, stage)}"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _chain(stage):
    out = []
    while stage:
        out.append(stage)
        stage = STAGES[stage][1]
    return out[::-1]


def require(cfg: dict, stage: str, *names) -> Path:
    """Upstream stage directory; MissingArtifact names the subcommand to run."""
    d = stage_dir(cfg, stage)
    for n in names or ("manifest.json",):
        if not (d / n).exists():
            raise MissingArtifact(f"missing {d / n}; run `hybridyn {stage}` with the same config first")
    return d


class Run:
    """Output directory of one stage plus the manifest written at the end."""

    def __init__(self, cfg, stage, args):
        self.cfg, self.stage, self.args = cfg, stage, args
        self.dir = stage_dir(cfg, stage)
        self.inputs, self.outputs = {}, []

    def path(self, name) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        return self.dir / name

    def used(self, path):
        self.inputs[str(path)] = file_sha256(path)

    def wrote(self, *names):
        self.outputs.extend(names)

    def write_json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.wrote(name)

    def write_text(self, name, text):
        self.path(name).write_text(text + "\n", encoding="utf-8")
        self.wrote(name)

    def finish(self, extra=None) -> dict:
        keys, _ = STAGES[self.stage]
        manifest = {
            "stage": self.stage,
            "stages": _chain(self.stage),
            "key": stage_key(self.cfg, self.stage),
            "config_file": self.args.config,
            "overrides": list(self.args.set or []),
            "config": {k: _get(self.cfg, k) for k in keys},
            "config_hash": config_hash(self.cfg),
            "seeds": {"seed": self.cfg["seed"]},
            "versions": {"hybridyn": __version__, "numpy": np.__version__,
                         "python": platform.python_version(), "backend": BACKEND},
            "output_dir": str(self.dir),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {n: file_sha256(self.path(n)) for n in sorted(set(self.outputs))},
        }
        if extra:
            manifest["summary"] = extra
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return manifest


# count-valued keys each stage needs to be >= 1 (fractions need 0 < x <= 1)
POSITIVE = {
    "gen-data": ("trajgen.max_configs", "trajgen.segments_per_joint"),
    "train": ("learn.window_len", "learn.train_samples"),
    "grid-search": ("learn.window_len", "learn.grid.passes"),
    "eval": ("learn.window_len", "learn.test_slice"),
    "observe": ("observer.n_moves",),
    "wrench-train": ("observer.window_len", "observer.train_runs", "observer.test_runs", "observer.n_moves"),
    "peg": ("peg.episodes", "peg.max_steps"),
    "wipe": (),
    "plan": ("planner.budget", "planner.population", "planner.elite"),
    "identify": ("learn.train_samples",),
}
FRACTIONS = {"grid-search": ("learn.train_fraction",), "peg": ("peg.min_success_rate",),
             "wipe": ("wipe.band",)}


def validate(cfg: dict, stage: str):
    for k in POSITIVE.get(stage, ()):
        v = _get(cfg, k)
        if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
            raise ContractError(f"{k} must be a positive integer, got {v!r}")
    for k in FRACTIONS.get(stage, ()):
        v = _get(cfg, k)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 < v <= 1:
            raise ContractError(f"{k} must lie in (0, 1], got {v!r}")
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg.get("seed"), bool) or cfg["seed"] < 0:
        raise ContractError(f"seed must be a non-negative integer, got {cfg.get('seed')!r}")


def _load_log(run: Run, path) -> TrajectoryLog:
    run.used(path)
    return TrajectoryLog.from_csv(path)


def _loss(run: Run, d: Path) -> LossParams:
    run.used(d / "loss.json")
    with open(d / "loss.json", encoding="utf-8") as fh:
        return LossParams.from_dict(json.load(fh))


def _model(run: Run, cfg, name: str, robot) -> HybridModel:
    d = require(cfg, "train")
    p = d / "models" / f"{name}.json"
    if not p.exists():
        raise MissingArtifact(f"missing {p}; add {name} to learn.compositions and run `hybridyn train`")
    run.used(p)
    return HybridModel.load(p, robot)


# ------------------------------------------------------------- subcommands

def cmd_gen_data(cfg, run, robot):
    seed = int(cfg["seed"])
    summary = pipeline.collection_summary(cfg, robot, seed)
    train = pipeline.collect(cfg, robot, seed)
    train.to_csv(run.path("train.csv"))
    run.wrote("train.csv")
    for s in cfg["learn"]["test_seeds"]:
        pipeline.collect(cfg, robot, int(s)).to_csv(run.path(f"test_{int(s)}.csv"))
        run.wrote(f"test_{int(s)}.csv")
    summary["train_samples"] = train.n_samples
    run.write_json("summary.json", summary)
    print(f"{summary['n_configs']} configurations, {summary['n_legs']} legs, "
          f"{train.n_samples} training samples -> {run.dir}")
    return summary


def cmd_identify(cfg, run, robot):
    d = require(cfg, "gen-data", "train.csv")
    loss = pipeline.identify(cfg, robot, _load_log(run, d / "train.csv"))
    run.write_json("loss.json", loss.to_dict())
    print(json.dumps(loss.to_dict()))
    return loss.to_dict()


def cmd_train(cfg, run, robot):
    d = require(cfg, "gen-data", "train.csv")
    loss = _loss(run, require(cfg, "identify", "loss.json"))
    train = pipeline.training_prefix(cfg, _load_log(run, d / "train.csv"))
    run.path("models").mkdir(exist_ok=True)
    models = pipeline.train_models(cfg, robot, train, loss)
    for name, m in models.items():
        m.save(run.path(f"models/{name}.json"))
        run.wrote(f"models/{name}.json")
    print(f"trained {', '.join(models)} on {train.n_samples} samples -> {run.dir}")
    return {"models": list(models), "train_samples": train.n_samples}


def cmd_grid_search(cfg, run, robot):
    d = require(cfg, "gen-data", "train.csv")
    loss = _loss(run, require(cfg, "identify", "loss.json"))
    train = pipeline.training_prefix(cfg, _load_log(run, d / "train.csv"))
    g = dict(cfg["learn"]["grid"])
    passes = int(g.pop("passes"))
    g.pop("composition")
    space = HyperSpace.from_dict(g, passes)
    res = coordinate_grid_search(space, pipeline.grid_objective(cfg, robot, train, loss), pipeline.gbt_params(cfg))
    run.write_json("best.json", {"params": res.best.to_dict(), "score": res.best_score,
                                 "initial_score": res.initial_score, "n_evaluations": res.n_evaluations})
    with open(run.path("trace.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pass", "param", "value", "score"])
        for t in res.trace:
            w.writerow([t["pass"], t["param"], t["value"], repr(t["score"])])
    run.wrote("trace.csv")
    print(f"best validation RMSE {res.best_score:.4f} N*m with {res.best.to_dict()}")
    return {"best_score": res.best_score, "n_evaluations": res.n_evaluations}


def cmd_eval(cfg, run, robot):
    d = require(cfg, "gen-data", "train.csv")
    tests = [_load_log(run, d / f"test_{int(s)}.csv") for s in cfg["learn"]["test_seeds"]]
    names = cfg["learn"]["compositions"]
    models = {n: _model(run, cfg, n, robot) for n in names}
    stats = evaluate_models(models, pipeline.test_slices(cfg, tests), window_len=int(cfg["learn"]["window_len"]))
    text = format_report(stats, run.path("report.csv"))
    run.wrote("report.csv")
    run.write_text("report.txt", text)
    print(text)
    return {s.name: s.mean for s in stats}


def cmd_observe(cfg, run, robot):
    hybrid = _model(run, cfg, cfg["observer"]["model"], robot)
    seed = int(cfg["seed"])
    q, r = pipeline.observer_noise(cfg, robot, hybrid, 10_000 * seed + 999)
    log = pipeline.contact_run(cfg, robot, 10_000 * seed + 500)
    out = observe(log, hybrid, q, r, robot)
    out.to_csv(run.path("observer.csv"))
    run.wrote("observer.csv")
    ok = np.isfinite(out.wrench[:, 2])
    mae = float(np.mean(np.abs(out.wrench[ok, 2] - log.wrench_true[ok, 2])))
    summary = {"q": q.tolist(), "r": r.tolist(), "analytic_fz_mae": mae}
    run.write_json("summary.json", summary)
    print(f"analytic F_Z MAE {mae:.3f} N over {int(ok.sum())} samples -> {run.dir}")
    return summary


def cmd_wrench_train(cfg, run, robot):
    hybrid = _model(run, cfg, cfg["observer"]["model"], robot)
    rep = pipeline.wrench_experiment(cfg, robot, hybrid, pipeline.gbt_params(cfg), int(cfg["seed"]))
    with open(run.path("wrench_model.json"), "w", encoding="utf-8") as fh:
        json.dump(rep.models[0].to_dict(), fh)
    run.wrote("wrench_model.json")
    summary = rep.to_dict()
    run.write_json("report.json", summary)
    lines = [f"{'features':<14}{'F_Z (N)':>10}{'M_X (N*m)':>12}{'M_Y (N*m)':>12}",
             f"{'windowed':<14}" + "".join(f"{v:>11.4f} " for v in rep.mae_windowed),
             f"{'instantaneous':<14}" + "".join(f"{v:>11.4f} " for v in rep.mae_instant),
             f"{'analytic':<14}{rep.mae_analytic_fz:>11.4f}"]
    run.write_text("report.txt", "\n".join(lines))
    print("\n".join(lines))
    return summary


def cmd_peg(cfg, run, robot):
    results = pipeline.peg_batch(cfg, robot, keep_rows={0})
    with open(run.path("episodes.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "success", "steps", "max_force", "max_moment"])
        for i, r in enumerate(results):
            w.writerow([i, int(r.success), r.steps, repr(r.max_force), repr(r.max_moment)])
    run.wrote("episodes.csv")
    results[0].to_csv(run.path("episode_000.csv"))
    run.wrote("episode_000.csv")
    rate = sum(r.success for r in results) / len(results)
    summary = {"episodes": len(results), "success_rate": rate,
               "mean_steps": float(np.mean([r.steps for r in results])),
               "max_force": max(r.max_force for r in results)}
    run.write_json("summary.json", summary)
    print(f"success {rate:.0%} of {len(results)} episodes -> {run.dir}")
    if rate < float(cfg["peg"]["min_success_rate"]):
        raise TaskFailure(f"success rate {rate:.2f} below {cfg['peg']['min_success_rate']}", summary)
    return summary


def cmd_wipe(cfg, run, robot):
    wc = cfg["wipe"]
    res = pipeline.wipe_run(cfg, robot)
    np.savetxt(run.path("wipe.csv"), np.column_stack([res.times, res.true_fz, res.est_fz, res.z]),
               delimiter=",", header="t,true_fz,est_fz,z", comments="", fmt="%.17g")
    run.wrote("wipe.csv")
    mae = res.steady_mae(float(wc["target_fz"]), float(wc["settle"]))
    limit = float(wc["band"]) * float(wc["target_fz"])
    summary = {"steady_mae": mae, "band": limit}
    run.write_json("summary.json", summary)
    print(f"steady-state mean |F_Z - {wc['target_fz']}| = {mae:.3f} N (band {limit:.2f} N)")
    if not mae < limit:
        raise TaskFailure(f"steady-state error {mae:.3f} N outside the {limit:.2f} N band", summary)
    return summary


def cmd_plan(cfg, run, robot):
    hybrid = _model(run, cfg, cfg["planner"]["composition"], robot)
    path = cfg["planner"].get("benchmark")
    if path is None:
        trajs, rc = bundled_benchmark()
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                trajs, rc = load_benchmark(yaml.safe_load(fh))
        except OSError as exc:
            raise ContractError(f"cannot read benchmark {path}: {exc}") from None
        run.used(path)
    results = pipeline.plan_all(cfg, hybrid, trajs, rc)
    run.write_json("plan.json", [r.to_dict() for r in results])
    dt = float(cfg["plant"]["sample_period"])
    for i, r in enumerate(results):
        for tag, tr in (("before", r.baseline), ("after", r.trajectory)):
            name = f"traj{i + 1}_{tag}.csv"
            tr.sample(dt).to_csv(run.path(name))
            run.wrote(name)
    text = report_table(results)
    run.write_text("report.txt", text)
    print(text)
    return {"mean_reduction": float(np.mean([r.reduction for r in results]))}


COMMANDS = {
    "gen-data": cmd_gen_data, "identify": cmd_identify, "train": cmd_train, "grid-search": cmd_grid_search,
    "eval": cmd_eval, "observe": cmd_observe, "wrench-train": cmd_wrench_train, "peg": cmd_peg,
    "wipe": cmd_wipe, "plan": cmd_plan,
}


def _keys_help(sections) -> str:
    lines = ["config keys (override with --set key=value):"]
    for dotted, default, doc in documented_keys():
        if dotted.split(".")[0] in sections:
            lines.append(f"  {dotted} = {default}" + (f"    [{doc}]" if doc else ""))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridyn", description=__doc__.split("\n\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=f"hybridyn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name], epilog=_keys_help(HELP_SECTIONS[name]),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", metavar="FILE", help="YAML file layered over the bundled defaults")
        sp.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config value (repeatable), e.g. --set peg.episodes=20")
        sp.add_argument("--out", metavar="DIR", help="shortcut for --set output_dir=DIR")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set) + ([f"output_dir={args.out}"] if args.out else [])
        cfg = load_config(args.config, overrides)
        robot = pipeline.robot_from_config(cfg)
        validate(cfg, args.command)
    except (ContractError, OSError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        run = Run(cfg, args.command, args)
        summary = COMMANDS[args.command](cfg, run, robot)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except TaskFailure as exc:
        run.finish(exc.args[1] if len(exc.args) > 1 else None)
        print(f"task failed: {exc.args[0]}", file=sys.stderr)
        return 4
    except TrackingDivergence as exc:
        print(f"task failed: {exc}", file=sys.stderr)
        return 4
    except RankDeficientError as exc:
        print(f"task failed: {exc}; the collected data does not excite every joint, "
              "raise trajgen.max_samples or learn.train_samples", file=sys.stderr)
        return 4
    except (ContractError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run.finish(summary)
    return 0

if __name__ == "__main__":
    sys.exit(main())
