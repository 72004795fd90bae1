"""Command-line entry point: simulate, run, batch and eval.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import MODES, ConfigError, RunConfig
from .experiment import run_batch
from .frontend import Box
from .metrics import empirical_cdf, position_errors, read_positions_csv, write_cdf_csv
from .pipeline import prepare, run, summary_json, write_run
from .sensors import LogFormatError, LogValidationError, load_beacon_map, load_log, save_beacon_map, save_log
from .simulator import Scenario, ScenarioError, simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("riloc")


class DataError(Exception):
    """Missing or malformed input data."""


def _siblings(log_path: Path) -> dict[str, Path]:
    stem = log_path.with_suffix("")
    return {
        "map": stem.with_name(stem.name + ".map.csv"),
        "true_map": stem.with_name(stem.name + ".true_map.csv"),
        "scenario": stem.with_name(stem.name + ".scenario.json"),
    }


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _load_scenario(name: str) -> Scenario:
    try:
        return Scenario.load(name)
    except ScenarioError as e:
        raise ConfigError(str(e)) from None


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = _load_scenario(args.scenario)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    sim = simulate(scenario, args.seed)
    save_log(sim.log, out)
    side = _siblings(out)
    save_beacon_map(sim.prior_map, side["map"])
    save_beacon_map(sim.true_map, side["true_map"])
    scenario.save(side["scenario"])
    return EXIT_OK


def _bounds(args: argparse.Namespace, cfg: RunConfig, side: dict[str, Path], prior) -> Box:
    if args.bounds:
        try:
            return Box(tuple(args.bounds[:3]), tuple(args.bounds[3:]))
        except ValueError as e:
            raise ConfigError(f"--bounds: {e}") from None
    scen = args.scenario or cfg.scenario
    if scen is None and side["scenario"].exists():
        scen = str(side["scenario"])
    if scen is not None:
        return _load_scenario(scen).world.search_area()
    # fall back to the map's footprint with a margin
    p = prior.positions()
    margin = np.array([5.0, 5.0, 0.0])
    return Box(tuple(p.min(0) - margin), tuple(np.maximum(p.max(0) + margin, p.min(0) - margin + 1e-6)))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    outdir = args.output or cfg.output
    if outdir is None:
        raise ConfigError("no output directory: pass -o or set 'output' in the config")
    log_path = Path(args.log)
    side = _siblings(log_path)
    map_path = Path(args.map) if args.map else side["map"]
    try:
        sensor_log = load_log(log_path)
        prior = load_beacon_map(map_path)
    except OSError as e:
        raise DataError(str(e)) from None
    bounds = _bounds(args, cfg, side, prior)
    result = run(prepare(sensor_log, cfg), prior, bounds, cfg)
    write_run(result, cfg, outdir)
    print(summary_json(result))
    return EXIT_OK


def cmd_batch(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    scenario = _load_scenario(args.scenario or cfg.scenario or "office")
    modes = args.modes.split(",") if args.modes else [cfg.mode]
    outdir = args.output or cfg.output
    if outdir is None:
        raise ConfigError("no output directory: pass -o or set 'output' in the config")
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    result = run_batch(scenario, cfg, args.runs, modes, jobs=args.jobs)
    result.write(outdir)
    summary = {m: dict(zip(("q1", "q2", "q3"), (c.q1, c.q2, c.q3))) for m in modes for c in [result.median_cdf(m)]}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _read_ground_truth(path: Path):
    if path.suffix == ".jsonl":
        sensor_log = load_log(path)
        if not sensor_log.ground_truth:
            raise DataError(f"{path} has no ground-truth records")
        t, p, _ = sensor_log.ground_truth_arrays()
        return t, p
    return read_positions_csv(path)


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        gt_t, gt_p = _read_ground_truth(Path(args.gt))
        est_t, est_p = read_positions_csv(args.est)
    except OSError as e:
        raise DataError(str(e)) from None
    except ValueError as e:
        raise DataError(str(e)) from None
    cdf = empirical_cdf(position_errors(est_t, est_p, gt_t, gt_p))
    write_cdf_csv(cdf, args.output)
    print(json.dumps({"q1": cdf.q1, "q2": cdf.q2, "q3": cdf.q3}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riloc", description="BLE range and IMU localization with a smoothing back-end.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic sensor log and its prior map")
    s.add_argument("scenario", help="scenario json, or a built-in name (office)")
    s.add_argument("-o", "--output", required=True, help="log file (.jsonl); map and scenario files are written beside it")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run one estimator mode on a log")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--config", help="RunConfig json")
    r.add_argument("--log", required=True, help="sensor log (.jsonl)")
    r.add_argument("--map", help="prior beacon map csv (default: <log>.map.csv)")
    r.add_argument("--scenario", help="scenario whose search area bounds the particle initialization")
    r.add_argument("--bounds", type=float, nargs=6, metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    r.add_argument("--seed", type=int)
    r.add_argument("-o", "--output", help="output directory")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("batch", help="simulate and run seeds seed..seed+N-1")
    b.add_argument("--runs", type=int, default=20)
    b.add_argument("--scenario", help="scenario json or built-in name (default: office)")
    b.add_argument("--config", help="RunConfig json")
    b.add_argument("--modes", help=f"comma-separated subset of {','.join(MODES)} (default: config mode)")
    b.add_argument("--seed", type=int)
    b.add_argument("--jobs", type=int, default=1, help="worker processes")
    b.add_argument("-o", "--output", help="output directory")
    b.set_defaults(func=cmd_batch)

    e = sub.add_parser("eval", help="error CDF of an estimate against ground truth")
    e.add_argument("--gt", required=True, help="ground truth: sensor log (.jsonl) or csv with t,px,py,pz")
    e.add_argument("--est", required=True, help="estimate csv with t,px,py,pz")
    e.add_argument("-o", "--output", required=True, help="cdf csv")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LogFormatError, LogValidationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
