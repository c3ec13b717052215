"""In-domain and out-of-domain errors of every method on one benchmark dataset.

    python scripts/method_comparison.py --system linear --seed 0 --out table.csv
"""

import argparse
import sys

from dynodisco.baselines import METHODS
from dynodisco.core import Hyperparams, init_coefficients
from dynodisco.evaluation import (evaluate_in_domain, evaluate_out_of_domain, fit_method,
                                  write_report)
from dynodisco.systems import build_benchmark_dataset, default_library


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--system", default="linear")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--methods", nargs="+", default=list(METHODS))
    ap.add_argument("--out", default="/dev/stdout")
    args = ap.parse_args(argv)

    ds = build_benchmark_dataset(args.system, args.seed)
    lib = default_library(ds.kind)
    hyper = Hyperparams().for_system(ds.kind)
    init = init_coefficients(ds, lib, hyper)  # shared by every method
    records = []
    for method in args.methods:
        model = fit_method(method, ds, hyper, args.seed, lib=lib, init_coeffs=init)
        records.append(evaluate_in_domain(model, ds).record)
        records.append(evaluate_out_of_domain(model, ds, args.seed).record)
        print(f"{method}: done", file=sys.stderr)
    write_report(args.out, records)


if __name__ == "__main__":
    main()
