"""Communication-interval ablation at a fixed number R*I of local steps.

Prints final exact ||grad F||^2 on the quadratic fixture for each I and
algorithm, plus the ratio to I = 1.

    python scripts/interval_ablation.py --budget 1600 --intervals 1 8 32
"""

import argparse
import csv
import sys

from fgdro.core import Algorithm
from fgdro.experiments import interval_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--budget", type=int, default=1600, help="total local steps R*I")
    parser.add_argument("--intervals", type=int, nargs="+", default=[1, 8, 32])
    parser.add_argument("--algorithms", nargs="+", default=["FGDRO_KL", "FGDRO_KL_ADAM"])
    args = parser.parse_args()

    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["algorithm", "local_steps", "rounds", "grad_norm_sq", "ratio_to_first"])
    for name in args.algorithms:
        res = interval_ablation(Algorithm(name), args.budget, tuple(args.intervals))
        first = res[args.intervals[0]]
        for I, g in res.items():
            writer.writerow([name, I, args.budget // I, f"{g:.6e}", f"{g / first:.2f}"])


if __name__ == "__main__":
    main()
