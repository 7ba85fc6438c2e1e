"""Worst-client loss of FedAvg, FGDRO-KL and FGDRO-KL-Adam on imbalanced
logistic-regression clients (seven with 200 samples, one with 10).

    python scripts/robustness_logreg.py --seeds 0 1 2 3 4
"""

import argparse

import numpy as np

from fgdro.experiments import robustness


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = parser.parse_args()

    res = robustness(args.seeds)
    print(f"{'algorithm':<15}" + "".join(f"seed {s:<5}" for s in args.seeds) + "median")
    for name, worst in res.worst.items():
        print(f"{name:<15}" + "".join(f"{w:<10.4f}" for w in worst) + f"{np.median(worst):.4f}")


if __name__ == "__main__":
    main()
