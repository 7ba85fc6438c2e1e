"""Final exact ||grad F||^2 of FGDRO-KL on the quadratic fixture as R grows.

    python scripts/convergence_trend.py --rounds 50 100 200 400 --interval 8
"""

import argparse
import csv
import sys

from fgdro.experiments import convergence_trend


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--rounds", type=int, nargs="+", default=[50, 100, 200, 400])
    parser.add_argument("--interval", type=int, default=8, help="local steps I per round")
    args = parser.parse_args()

    res = convergence_trend(tuple(args.rounds), args.interval)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["rounds", "local_steps", "grad_norm_sq"])
    for R, g in res.items():
        writer.writerow([R, args.interval, f"{g:.6e}"])


if __name__ == "__main__":
    main()
