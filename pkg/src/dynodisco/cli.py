"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 training failure,
4 model/dataset incompatibility.  ``DYNODISCO_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

from . import __version__
from .config import RunConfig, dump_config, load_config
from .errors import (AdaptationError, CompatibilityError, DynoDiscoError, InitializationError,
                     IntegrationError, InvalidArgumentError, TrainingError)
from .evaluation import (REPORT_COLUMNS, evaluate_in_domain, evaluate_out_of_domain, fit_method,
                         horizon_sweep, variance_sweep, write_predictions, write_report,
                         write_sweep, adapt_coefficients)
from .storage import (check_compatible, load_dataset, load_model, manifest_truth, read_manifest,
                      save_dataset, save_model)
from .systems import build_dataset

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_COMPAT = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}

log = logging.getLogger("dynodisco")


def _setup_logging():
    name = os.environ.get("DYNODISCO_LOG", "warn").lower()
    if name not in LOG_LEVELS:
        raise InvalidArgumentError(f"DYNODISCO_LOG must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


def _config(args) -> RunConfig:
    return load_config(args.config, system=args.system, method=args.method, seed=args.seed,
                       out=args.out)


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _dataset_dir(args, cfg):
    return args.data or os.path.join(cfg.out, "data")


def _model_path(args, cfg):
    return args.model or os.path.join(cfg.out, f"model-{cfg.method}.json")


# -- commands -----------------------------------------------------------------

def cmd_generate(args):
    cfg = _config(args)
    root = _ensure_dir(_dataset_dir(args, cfg))
    dataset = build_dataset(cfg.dataset_spec(), cfg.seed)
    save_dataset(dataset, root, cfg.lib(), extra={"effective_config": cfg.to_dict()})
    print(f"wrote {root}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    dataset = load_dataset(_dataset_dir(args, cfg))
    if dataset.kind.value != cfg.system:
        raise CompatibilityError(f"dataset holds {dataset.kind.value}, config says {cfg.system}")
    _ensure_dir(cfg.out)
    t0 = time.perf_counter()
    model = fit_method(cfg.method, dataset, cfg.hyper, cfg.seed, lib=cfg.lib())
    seconds = time.perf_counter() - t0
    path = _model_path(args, cfg)
    save_model(model, path)
    with open(os.path.join(cfg.out, f"train-{cfg.method}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "coeff_loss", "mask_loss", "val_loss", "active"])
        for row in model.train_report:
            w.writerow([row["iter"]] + [f"{row[k]:.17g}" for k in
                                        ("coeff_loss", "mask_loss", "val_loss")] + [row["active"]])
    dump_config(cfg, os.path.join(cfg.out, "effective-config.json"))
    if cfg.record_runtime:
        with open(os.path.join(cfg.out, f"train-{cfg.method}.runtime"), "w") as fh:
            fh.write(f"{seconds:.6f}\n")
    print(f"wrote {path} (mask entries: {int(model.mask.sum())})")
    return EXIT_OK


def cmd_adapt(args):
    cfg = _config(args)
    root = _dataset_dir(args, cfg)
    dataset = load_dataset(root)
    model = load_model(_model_path(args, cfg))
    check_compatible(model, dataset, read_manifest(root))
    out = {}
    for env_id in dataset.heldout_env_ids:
        c = adapt_coefficients(model, dataset.adaptation[env_id], cfg.seed)
        out[str(env_id)] = [[float(v) for v in row] for row in c]
    path = os.path.join(_ensure_dir(cfg.out), f"adapted-{model.method}.json")
    with open(path, "w") as fh:
        json.dump({"method": model.method, "coefficients": out}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    root = _dataset_dir(args, cfg)
    dataset = load_dataset(root)
    model = load_model(_model_path(args, cfg))
    manifest = read_manifest(root)
    check_compatible(model, dataset, manifest)
    truth = manifest_truth(manifest, model.lib)
    out = _ensure_dir(cfg.out)
    runtime = None
    rt_path = os.path.join(cfg.out, f"train-{model.method}.runtime")
    if cfg.record_runtime and os.path.exists(rt_path):
        with open(rt_path) as fh:
            runtime = float(fh.read())
    results = []
    modes = ["in-domain", "out-of-domain"] if args.mode == "both" else [args.mode]
    for mode in modes:
        if mode == "in-domain":
            res = evaluate_in_domain(model, dataset, runtime_s=runtime, truth=truth)
        else:
            res = evaluate_out_of_domain(model, dataset, cfg.seed, runtime_s=runtime,
                                         truth=truth)
        results.append(res)
        pred_dir = _ensure_dir(os.path.join(out, "predictions", f"{model.method}-{mode}"))
        for tr in res.traces:
            write_predictions(os.path.join(pred_dir, f"env{tr.env_id:02d}-traj{tr.traj:02d}.csv"),
                              tr)
    path = os.path.join(out, f"report-{model.method}.csv")
    write_report(path, [r.record for r in results])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    out = _ensure_dir(cfg.out)
    jobs = args.jobs
    if args.kind == "variance":
        values = args.values if args.values is not None else list(cfg.sweep.variances)
        if not values:
            raise InvalidArgumentError("variance sweep list is empty")
        rows = variance_sweep(cfg.dataset_spec(), values, list(cfg.sweep.methods), cfg.seed, cfg.hyper,
                              jobs)
    else:
        values = args.values if args.values is not None else list(cfg.sweep.etas)
        if not values:
            raise InvalidArgumentError("horizon sweep list is empty")
        rows = horizon_sweep(cfg.dataset_spec(), [int(v) for v in values], cfg.seed, cfg.hyper, jobs)
    path = os.path.join(out, f"sweep-{args.kind}.csv")
    write_sweep(path, args.kind, rows, cfg.record_runtime)
    print(f"wrote {path}")
    if not any(r.status == "ok" for r in rows):
        raise TrainingError("every sweep cell failed")
    return EXIT_OK


def cmd_report(args):
    """Concatenate report CSVs found under the output directory into one table."""
    cfg = _config(args)
    found = []
    for dirpath, _, names in sorted(os.walk(cfg.out)):
        for name in sorted(names):
            if name.startswith("report-") and name.endswith(".csv"):
                found.append(os.path.join(dirpath, name))
    rows = []
    for path in found:
        with open(path, newline="") as fh:
            rows += list(csv.DictReader(fh))
    out = os.path.join(_ensure_dir(cfg.out), "summary.csv")
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in REPORT_COLUMNS})
    width = max((len(r["method"]) for r in rows), default=6)
    for r in rows:
        print(f"{r['system']:<15} {r['method']:<{width}} {r['setting']:<14} "
              f"mse={r['mse_total']:<24} P={r['precision'] or '-'} R={r['recall'] or '-'}")
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "adapt": cmd_adapt,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--system", help="linear | lorenz | lotka-volterra | damped-pendulum")
    common.add_argument("--method", help="spreme | sindy | sindy-intersection | sindy-union")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--data", help="dataset directory (default: OUT/data)")
    common.add_argument("--model", help="model file (default: OUT/model-METHOD.json)")

    p = _Parser(prog="dynodisco", description="Shared sparse dynamics discovery across environments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="generate a benchmark dataset")
    sub.add_parser("train", parents=[common], help="fit a model on a dataset")
    sub.add_parser("adapt", parents=[common], help="fit coefficients for held-out environments")
    ev = sub.add_parser("evaluate", parents=[common], help="write an evaluation report")
    ev.add_argument("--mode", choices=("in-domain", "out-of-domain", "both"), default="both")
    sw = sub.add_parser("sweep", parents=[common], help="variance or horizon sweep")
    sw.add_argument("kind", choices=("variance", "horizon"))
    sw.add_argument("--values", type=float, nargs="*",
                    help="override the sweep list from the config")
    sub.add_parser("report", parents=[common], help="collect report CSVs into summary.csv")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        if args.jobs < 1:
            raise InvalidArgumentError("--jobs must be >= 1")
        return COMMANDS[args.command](args)
    except CompatibilityError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_COMPAT
    except (TrainingError, InitializationError, AdaptationError, IntegrationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TRAIN
    except (InvalidArgumentError, DynoDiscoError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
