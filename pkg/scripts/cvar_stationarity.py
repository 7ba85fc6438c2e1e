"""Proximal near-stationarity of FGDRO-CVaR (K = 3) on the quadratic fixture.

    python scripts/cvar_stationarity.py --rounds 50 400 --rho-hat 2
"""

import argparse
import csv
import sys

from fgdro.experiments import cvar_stationarity


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--rounds", type=int, nargs="+", default=[50, 100, 200, 400])
    parser.add_argument("--rho-hat", type=float, default=2.0)
    parser.add_argument("--inner-steps", type=int, default=2000)
    args = parser.parse_args()

    res = cvar_stationarity(tuple(args.rounds), args.rho_hat, args.inner_steps)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["rounds", "dist_sq"])
    for R, d in res.items():
        writer.writerow([R, f"{d:.6e}"])


if __name__ == "__main__":
    main()
