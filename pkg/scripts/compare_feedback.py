"""Open-loop against closed-loop front-end accuracy with IMU bias and map misalignment.

Also runs the front-end on the true map as an upper bound on what map
feedback can deliver.

    python3 scripts/compare_feedback.py --runs 20 -o out/feedback
"""

import argparse
import json
from dataclasses import replace

from riloc.config import RunConfig
from riloc.experiment import run_batch
from riloc.metrics import empirical_cdf, median_cdf
from riloc.pipeline import prepare, run
from riloc.simulator import Scenario, office_scenario, simulate


def true_map_q3(scenario: Scenario, cfg: RunConfig, n_runs: int) -> float:
    cdfs = []
    for seed in range(cfg.seed, cfg.seed + n_runs):
        sim = simulate(scenario, seed)
        c = replace(cfg, seed=seed)
        res = run(prepare(sim.log, c), sim.true_map, scenario.world.search_area(), c, "pf-imu")
        cdfs.append(empirical_cdf(res.frontend_errors))
    return median_cdf(cdfs).q3


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--shadowing", type=float, default=4.0, help="RSSI shadowing sigma (dB)")
    p.add_argument("--bias", type=float, default=0.1, help="constant accel bias along body z (m/s^2)")
    p.add_argument("--misalignment", type=float, default=0.5, help="beacon prior offset sigma (m)")
    p.add_argument("--config", help="RunConfig json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bound", action="store_true", help="also run pf-imu on the true map")
    p.add_argument("-o", "--output", default="out/feedback")
    args = p.parse_args()

    sc = office_scenario(
        shadowing_sigma=args.shadowing, accel_bias=(0.0, 0.0, args.bias), beacon_prior_offset_sigma=args.misalignment
    )
    cfg = RunConfig.load(args.config) if args.config else RunConfig(seed=args.seed)
    batch = run_batch(sc, cfg, args.runs, ["pf-imu", "open-loop", "closed-loop"])
    batch.write(args.output)
    q = {m: batch.median_cdf(m).q3 for m in batch.modes()}
    q["ratio"] = q["closed-loop"] / q["open-loop"]
    if args.bound:
        q["pf-imu-true-map"] = true_map_q3(sc, cfg, args.runs)
    print(json.dumps(q, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
