"""Single-phantom overfit run: stage 1, stage 2, then reconstruction quality against the init."""

import argparse
import json
from pathlib import Path

from orthoct.experiments import overfit_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="results/overfit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1-steps", type=int, default=300)
    p.add_argument("--stage2-steps", type=int, default=300)
    args = p.parse_args()
    res = overfit_experiment(args.out, args.seed, args.stage1_steps, args.stage2_steps, verbose=True)
    Path(args.out, "summary.json").write_text(json.dumps(res, indent=2) + "\n")
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
