"""Command-line front end: ``freeflow <subcommand> ...``.

Every subcommand that writes results first writes a run manifest next to
its primary output, then fills in output hashes and wall-clock time when
done. ``freeflow replay`` reruns a manifest and checks the data files are
byte-identical.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import statistics
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .network import ScenarioError, scenario_hash
from .parallel import parallel_map

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONTROLLERS = ("none", "equal_split", "prop_split", "green_wave", "scats", "scoot", "backpressure", "dqn")
DEFAULT_DEMANDS = (100, 200, 300, 400, 500, 600, 700, 800, 1000, 1200, 1600, 2400)
# data files whose bytes a replay must reproduce
REPLAY_SUFFIXES = (".csv", ".meta", ".json")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: list[str]
    scenario: str | None
    scenario_hash: str | None
    seeds: list[int]
    code_version: str = __version__
    outputs: dict[str, str | None] = field(default_factory=dict)  # path -> sha256
    wall_clock_s: float | None = None
    status: str = "running"

    @staticmethod
    def path_for(primary) -> Path:
        p = Path(primary)
        return p.with_name(p.name + ".manifest.json")

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**doc)
        except (TypeError, json.JSONDecodeError) as exc:
            raise UsageError(f"{path}: not a run manifest ({exc})") from None


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Run:
    """Manifest lifecycle around one subcommand."""

    def __init__(self, argv, primary, scenario=None, data=None, seeds=()):
        self.path = RunManifest.path_for(primary)
        self.t0 = time.perf_counter()
        self.m = RunManifest(list(argv), None if scenario is None else str(scenario),
                             None if data is None else scenario_hash(data), [int(s) for s in seeds])
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.m.write(self.path)

    def done(self, outputs, status: str = "ok") -> None:
        self.m.outputs = {str(p): _sha256(p) for p in outputs if Path(p).exists()}
        self.m.wall_clock_s = time.perf_counter() - self.t0
        self.m.status = status
        self.m.write(self.path)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def parse_int_list(text: str) -> list[int]:
    """``"0,1,2"``, ``"0-4"`` or a mix of both; values are nonnegative."""
    out = []
    try:
        for part in filter(None, (x.strip() for x in text.split(","))):
            lo, _, hi = part.partition("-")
            out.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    except ValueError:
        raise UsageError(f"cannot parse integer list {text!r}") from None
    if not out:
        raise UsageError("empty list")
    return out


def parse_float_list(text: str) -> list[float]:
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None
    if not out:
        raise UsageError("empty list")
    return out


def _load(ref):
    from .scenarios import load_scenario

    return load_scenario(ref)


def _median(xs) -> float:
    return statistics.median(xs) if xs else math.nan


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# simulate / eval
# ---------------------------------------------------------------------------

def _simulate_one(args):
    from .control import make_controller
    from .dynamics import TRACE_HEADER, Simulation
    from .network import build_network

    cfg, kind, params, seed, trace_path = args
    ctrl = make_controller(kind, params)
    fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", encoding="utf-8")
        fh.write(TRACE_HEADER)
    try:
        sim = Simulation(build_network(cfg), seed=seed, controller=ctrl, trace=fh)
        sim.run()
    finally:
        if fh is not None:
            fh.close()
    return sim.report()


def _trace_paths(trace, seeds):
    if trace is None:
        return [None] * len(seeds)
    p = Path(trace)
    if len(seeds) == 1:
        return [p]
    return [p.with_name(f"{p.stem}_seed{s}{p.suffix}") for s in seeds]


def _finish_report(reports, out, meta, figures: bool):
    from .metrics import write_report

    write_report(reports, out, meta=meta)
    paths = [Path(out), Path(out).with_suffix(".meta")]
    if figures:
        from .plotting import plot_report

        paths.append(plot_report(reports, path=Path(out).with_suffix(".png")))
    return paths


def _print_summary(reports) -> None:
    from .metrics import METRIC_NAMES, aggregate

    means, stdevs = aggregate(reports)
    for name, m, s in zip(METRIC_NAMES, means, stdevs):
        print(f"{name:>14s} {m:14.3f} +- {s:.3f}")


def cmd_simulate(args, argv) -> int:
    cfg, data = _load(args.scenario)
    kind = args.controller or cfg.controller.type
    if args.params is not None:
        try:
            params = json.loads(args.params)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--params is not valid JSON: {exc}") from None
    else:
        params = dict(cfg.controller.params) if kind == cfg.controller.type else {}
    if kind == "dqn":
        if args.policy:
            params["policy"] = args.policy
        if "policy" not in params:
            raise UsageError("controller dqn needs --policy")
        _check_policy(params["policy"], cfg)
    if args.compliance is not None:
        cfg = cfg.with_sim(compliance=args.compliance)
    seeds = args.seeds or [cfg.sim.seed]
    run = _Run(argv, args.out, args.scenario, data, seeds)
    traces = _trace_paths(args.trace, seeds)
    reports = parallel_map(_simulate_one, [(cfg, kind, params, s, t) for s, t in zip(seeds, traces)])
    meta = {"scenario": args.scenario, "scenario_hash": scenario_hash(data), "controller": kind,
            "controller_params": params, "seeds": seeds}
    outputs = _finish_report(reports, args.out, meta, not args.no_figures)
    run.done(outputs + [t for t in traces if t is not None])
    _print_summary(reports)
    return EXIT_OK


def _check_policy(path, cfg):
    from .network import build_network
    from .rl import load_policy

    policy = load_policy(path)
    policy.check(len(build_network(cfg).super_segments))
    return policy


def cmd_eval(args, argv) -> int:
    from .rl import evaluate

    cfg, data = _load(args.scenario)
    policy = _check_policy(args.policy, cfg)
    if args.compliance is not None:
        cfg = cfg.with_sim(compliance=args.compliance)
    seeds = args.seeds or [cfg.sim.seed]
    run = _Run(argv, args.out, args.scenario, data, seeds)
    reports = evaluate(policy, cfg, seeds)
    meta = {"scenario": args.scenario, "scenario_hash": scenario_hash(data), "controller": "dqn",
            "policy": str(args.policy), "policy_sha256": _sha256(args.policy), "seeds": seeds}
    outputs = _finish_report(reports, args.out, meta, not args.no_figures)
    run.done(outputs)
    _print_summary(reports)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    from .rl import DQNConfig, save_policy, train

    cfg, data = _load(args.scenario)
    run = _Run(argv, args.out, args.scenario, data, [args.seed])
    dqn = DQNConfig(lr=args.lr, batch=args.batch)

    def progress(h):
        loss = "-" if h["loss"] is None else f"{h['loss']:.4g}"
        _log(f"episode {h['episode']:3d}  eps {h['epsilon']:.3f}  return {h['return']:.1f}  loss {loss}")

    policy = train(cfg, args.regime, args.episodes, args.seed, dqn, on_episode=progress)
    out = save_policy(policy, args.out)
    outputs = [out]
    if not args.no_figures and policy.meta["history"]:
        from .plotting import plot_training

        outputs.append(plot_training(policy.meta["history"], Path(args.out).with_suffix(".png")))
    run.done(outputs)
    print(f"policy written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args, argv) -> int:
    from .calibration import fit_summary, fit_vdf, is_unimodal, mean_curve, per_seed_fits, sweep_demand, write_samples

    cfg, data = _load(args.scenario)
    demands = args.demands or list(DEFAULT_DEMANDS)
    seeds = args.seeds or [0, 1, 2]
    run = _Run(argv, args.out, args.scenario, data, seeds)
    samples = sweep_demand(cfg, demands, seeds, window=args.window)
    out = write_samples(samples, args.out)
    outputs = [out]
    fit = None
    status = EXIT_OK
    try:
        fit = fit_vdf(samples)
        per_seed = per_seed_fits(samples) if len(seeds) > 1 else None
        summary = fit_summary(fit, per_seed)
        rho, q = mean_curve(samples)
        summary["empirical_unimodal"] = is_unimodal(rho, q)
        fit_path = Path(args.out).with_suffix(".fit.json")
        fit_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        outputs.append(fit_path)
        print(f"best family {fit.family}: rho_star {fit.rho_star:.4f}, c_max {fit.c_max * 3600:.1f} veh/h")
        if per_seed:
            print(f"per-seed rho_star spread {summary['rho_star_spread']:.3%}")
        print(f"empirical curve unimodal: {summary['empirical_unimodal']}")
    except ValueError as exc:
        _log(f"freeflow: fit failed: {exc}")
        status = EXIT_RUNTIME
    if not args.no_figures:
        from .plotting import plot_fundamental_diagram

        outputs.append(plot_fundamental_diagram(samples, fit, Path(args.out).with_suffix(".png")))
    run.done(outputs, "ok" if status == EXIT_OK else "fit failed")
    return status


# ---------------------------------------------------------------------------
# poc-merge
# ---------------------------------------------------------------------------

def quick_rho_star(seeds=(0, 1, 2)) -> float:
    """Critical occupancy from a default sweep of the single-segment scenario."""
    from .calibration import fit_vdf, sweep_demand
    from .network import scenario_from_dict
    from .scenarios import single_segment

    samples = sweep_demand(scenario_from_dict(single_segment()), DEFAULT_DEMANDS, seeds)
    return fit_vdf(samples).rho_star


def cmd_poc(args, argv) -> int:
    from .poc import POC_CONTROLLERS, poc_merge

    cfg, data = _load(args.scenario)
    kinds = args.controller or list(POC_CONTROLLERS)
    for k in kinds:
        if k not in POC_CONTROLLERS:
            raise UsageError(f"poc-merge controller must be one of {', '.join(POC_CONTROLLERS)}; got {k!r}")
    seeds = args.seeds or [0, 1, 2, 3, 4]
    run = _Run(argv, args.out, args.scenario, data, seeds)
    rho_star = args.rho_star
    if rho_star is None:
        _log("no --rho-star given; calibrating on single_segment")
        rho_star = quick_rho_star()
    _log(f"rho_star = {rho_star:.4f}")
    results = poc_merge(kinds, seeds, rho_star, cfg)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller", "seed", "time_to_jam_s", "throughput", "speed_avg_kmh", "max_occupancy",
                    "rho_star"])
        for r in results:
            w.writerow([r.controller, r.seed, repr(r.time_to_jam), r.throughput, repr(r.speed_avg),
                        repr(r.max_occupancy), repr(rho_star)])
    outputs = [Path(args.out)]
    if not args.no_figures:
        from .plotting import plot_poc

        outputs.append(plot_poc(results, Path(args.out).with_suffix(".png")))
    run.done(outputs)
    print(f"{'controller':>14s} {'time-to-jam':>12s} {'throughput':>10s} {'speed':>8s}")
    for k in kinds:
        rs = [r for r in results if r.controller == k]
        print(f"{k:>14s} {_median([r.time_to_jam for r in rs]):12.1f} "
              f"{_median([r.throughput for r in rs]):10.1f} {_median([r.speed_avg for r in rs]):8.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay / scenario
# ---------------------------------------------------------------------------

def _redirect(argv: list[str], out_dir: Path) -> list[str]:
    argv = list(argv)
    for flag in ("--out", "--trace"):
        if flag in argv:
            i = argv.index(flag) + 1
            argv[i] = str(out_dir / Path(argv[i]).name)
    return argv


def cmd_replay(args, argv) -> int:
    m = RunManifest.load(args.manifest)
    if m.scenario is not None:
        _, data = _load(m.scenario)
        if scenario_hash(data) != m.scenario_hash:
            raise UsageError(f"scenario {m.scenario} changed since the run (hash mismatch)")
    out_dir = Path(args.out_dir) if args.out_dir else Path(tempfile.mkdtemp(prefix="freeflow-replay-"))
    out_dir.mkdir(parents=True, exist_ok=True)
    code = main(_redirect(m.command, out_dir))
    if code != EXIT_OK:
        return code
    mismatched = []
    checked = 0
    for old, digest in m.outputs.items():
        if Path(old).suffix not in REPLAY_SUFFIXES or old.endswith(".manifest.json"):
            continue
        new = out_dir / Path(old).name
        checked += 1
        if not new.exists() or _sha256(new) != digest:
            mismatched.append(Path(old).name)
    if mismatched:
        print(f"replay differs: {', '.join(mismatched)}")
        return EXIT_RUNTIME
    print(f"replay reproduced {checked} file(s) byte-identically in {out_dir}")
    return EXIT_OK


def cmd_scenario(args, argv) -> int:
    from .scenarios import LIBRARY, scenario_text

    if args.name not in LIBRARY:
        raise UsageError(f"unknown library scenario {args.name!r}; choose from {', '.join(LIBRARY)}")
    text = scenario_text(args.name)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freeflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default, seeds=True):
        sp.add_argument("--out", default=out_default, help=f"primary output file (default {out_default})")
        sp.add_argument("--no-figures", action="store_true", help="skip the PNG next to the output")
        if seeds:
            sp.add_argument("--seeds", type=parse_int_list, help="comma list or range, e.g. 0,1,2 or 0-4")

    sp = sub.add_parser("simulate", help="run a scenario and write the metrics report")
    sp.add_argument("--scenario", required=True, help="library name or scenario document path")
    sp.add_argument("--controller", choices=CONTROLLERS)
    sp.add_argument("--params", help="controller parameters as a JSON object")
    sp.add_argument("--policy", help="policy file for the dqn controller")
    sp.add_argument("--compliance", type=float, help="fraction of vehicles obeying speed commands")
    sp.add_argument("--trace", help="per-step vehicle trace CSV (one file per seed)")
    common(sp, "report.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train a DQN speed policy")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--regime", choices=("src", "src-tl"), default="src")
    sp.add_argument("--episodes", type=int, default=60)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch", type=int, default=64)
    common(sp, "policy.json", seeds=False)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="greedy rollouts of a trained policy")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--compliance", type=float)
    common(sp, "eval.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("calibrate", help="demand sweep and VDF fit")
    sp.add_argument("--scenario", default="single_segment")
    sp.add_argument("--demands", type=parse_float_list, help="veh/h levels, comma separated")
    sp.add_argument("--window", type=float, default=600.0, help="steady measurement window (s)")
    common(sp, "vdf_samples.csv")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("poc-merge", help="time-to-jam comparison on the 2:1 merge")
    sp.add_argument("--scenario", default="merge_2to1")
    sp.add_argument("--controller", type=lambda s: [x.strip() for x in s.split(",") if x.strip()],
                    help="comma list of controllers (default all)")
    sp.add_argument("--rho-star", type=float, help="critical occupancy (default: quick calibration)")
    common(sp, "poc.csv")
    sp.set_defaults(func=cmd_poc)

    sp = sub.add_parser("replay", help="rerun a manifest and compare outputs byte for byte")
    sp.add_argument("manifest")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("scenario", help="print a library scenario document")
    sp.add_argument("name")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_scenario)
    return p


def main(argv=None) -> int:
    from .rl import PolicyMismatch, TrainingDiverged

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args, argv)
    except (UsageError, ScenarioError, PolicyMismatch, FileNotFoundError) as exc:
        print(f"freeflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"freeflow: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"freeflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
