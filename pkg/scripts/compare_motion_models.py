"""Random-walk against IMU-driven particle proposals on the office scenario.

Writes per-run errors, median CDFs and quartile tables to the output directory.

    python3 scripts/compare_motion_models.py --runs 20 -o out/motion
"""

import argparse
import json

from riloc.config import RunConfig
from riloc.experiment import run_batch
from riloc.simulator import Scenario


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--scenario", default="scripts/scenarios/office.json")
    p.add_argument("--config", help="RunConfig json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="out/motion")
    args = p.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig(seed=args.seed)
    batch = run_batch(Scenario.load(args.scenario), cfg, args.runs, ["pf-rw", "pf-imu"])
    batch.write(args.output)
    q = {m: batch.median_cdf(m).q3 for m in batch.modes()}
    q["ratio"] = q["pf-imu"] / q["pf-rw"]
    print(json.dumps(q, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
