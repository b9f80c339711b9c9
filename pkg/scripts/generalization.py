"""Train on a seeded split of synthetic phantoms and score the held-out volumes."""

import argparse
import json
from pathlib import Path

from orthoct.experiments import generalization_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="results/generalization")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1-epochs", type=int, default=15)
    p.add_argument("--stage2-epochs", type=int, default=6)
    args = p.parse_args()
    res = generalization_experiment(
        args.out, args.count, seed=args.seed, stage1_epochs=args.stage1_epochs, stage2_epochs=args.stage2_epochs,
        verbose=True,
    )
    Path(args.out, "summary.json").write_text(json.dumps(res, indent=2) + "\n")
    print(json.dumps({k: v for k, v in res.items() if k != "per_volume"}, indent=2))


if __name__ == "__main__":
    main()
