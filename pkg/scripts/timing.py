"""Single-threaded inference timing for a trained checkpoint pair."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[var] = "1"

import argparse  # noqa: E402
import json  # noqa: E402

from orthoct.experiments import timing_experiment  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--coarse", required=True)
    p.add_argument("--refine", required=True)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args()
    print(json.dumps(timing_experiment(args.coarse, args.refine, repeats=args.repeats), indent=2))


if __name__ == "__main__":
    main()
