"""Metrics, in-domain / out-of-domain evaluation and the parameter sweeps."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import baseline_model, sindy_model
from .core import Hyperparams, SpremeModel, adapt, init_coefficients, rollout, train
from .errors import DynoDiscoError, InvalidArgumentError
from .integrators import rk4_steps
from .sindy import fit_environment
from .systems import (BENCHMARK_SPECS, Dataset, DatasetSpec, SystemKind, build_dataset,
                      default_library, in_domain_test_trajectories, true_support)

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("system", "method", "setting", "mse_total", "mse_interp", "mse_extrap",
                  "precision", "recall", "runtime_s")
UNSTABLE = "-"


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InvalidArgumentError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def mask_precision_recall(predicted, truth) -> tuple[float, float]:
    """Entry-set precision and recall; an empty prediction has precision 1."""
    P = np.asarray(predicted).astype(bool)
    S = np.asarray(truth).astype(bool)
    if P.shape != S.shape:
        raise InvalidArgumentError(f"shape mismatch {P.shape} vs {S.shape}")
    if not S.any():
        raise InvalidArgumentError("ground-truth support is empty")
    hit = int((P & S).sum())
    precision = 1.0 if not P.any() else hit / int(P.sum())
    return precision, hit / int(S.sum())


@dataclass
class EvalRecord:
    system: str
    method: str
    setting: str
    mse_total: float
    mse_interp: float
    mse_extrap: float
    precision: float | None = None
    recall: float | None = None
    runtime_s: float | None = None

    def row(self):
        return [_fmt(getattr(self, c)) if c not in ("system", "method", "setting")
                else getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class PredictionTrace:
    env_id: int
    traj: int
    times: np.ndarray
    truth: np.ndarray
    pred: np.ndarray


@dataclass
class EvalResult:
    record: EvalRecord
    traces: list = field(default_factory=list)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float) and not np.isfinite(v):
        return UNSTABLE
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def _split_errors(traces, horizon):
    """Pool squared errors over traces; t = 0 is excluded, t <= horizon is interpolation."""
    sq_in, sq_out = [], []
    for tr in traces:
        if not np.all(np.isfinite(tr.pred)):
            return np.inf, np.inf, np.inf
        err = (tr.pred[1:] - tr.truth[1:]) ** 2
        inside = tr.times[1:] <= horizon + 1e-9
        sq_in.append(err[inside])
        sq_out.append(err[~inside])
    sq_in = np.concatenate(sq_in) if sq_in else np.zeros((0, 1))
    sq_out = np.concatenate(sq_out) if sq_out else np.zeros((0, 1))
    allsq = np.concatenate([sq_in, sq_out])

    def mean(a):
        return float(a.mean()) if a.size else float("nan")

    return mean(allsq), mean(sq_in), mean(sq_out)


def _traces(model: SpremeModel, weights_mask, coeffs, env_id, trajs):
    out = []
    with np.errstate(all="ignore"):
        for i, tr in enumerate(trajs):
            pred = rollout(weights_mask, coeffs, tr.states[0], tr.times, model.lib,
                           model.hyper.substeps_for(tr.dt))
            out.append(PredictionTrace(env_id, i, tr.times, tr.states, pred))
    return out


def _support(model: SpremeModel, coeff_list):
    if model.method == "sindy":
        return np.any([np.asarray(c) != 0 for c in coeff_list], axis=0)
    return model.mask.astype(bool)


def _precision_recall(model, dataset, coeff_list, truth):
    if truth is None:
        return None, None
    if isinstance(truth, str) and truth == "auto":
        truth = true_support(dataset.kind, model.lib)
    return mask_precision_recall(_support(model, coeff_list), truth)


def evaluate_in_domain(model: SpremeModel, dataset: Dataset, n_traj=None,
                       runtime_s=None, truth="auto") -> EvalResult:
    """Roll out each training environment's coefficients on fresh test-resolution data.

    ``truth`` is the ground-truth support for precision/recall: ``"auto"``
    derives it from the system kind, ``None`` leaves both columns empty.
    """
    if dataset.spec is None:
        raise InvalidArgumentError("in-domain evaluation needs the dataset spec")
    traces, coeff_list = [], []
    for env_id in model.env_ids:
        c = model.coeffs_for(env_id)
        coeff_list.append(c)
        trajs = in_domain_test_trajectories(dataset, env_id, n_traj)
        traces += _traces(model, model.mask, c, env_id, trajs)
    total, interp, extrap = _split_errors(traces, dataset.spec.train.horizon)
    prec, rec = _precision_recall(model, dataset, coeff_list, truth)
    rec_ = EvalRecord(dataset.kind.value, model.method, "in-domain", total, interp, extrap,
                      prec, rec, runtime_s)
    return EvalResult(rec_, traces)


def adapt_coefficients(model: SpremeModel, trajs, seed=0):
    """New-environment coefficients: a fresh SINDy fit for ``sindy``, masked adaptation otherwise."""
    trajs = list(trajs)
    if model.method == "sindy":
        return fit_environment(trajs, model.lib, model.hyper.thresholds,
                               val_frac=model.hyper.val_frac,
                               substeps=model.hyper.substeps_for(trajs[0].dt))
    return adapt(model, trajs, seed=seed)


def evaluate_out_of_domain(model: SpremeModel, dataset: Dataset, seed=0,
                           runtime_s=None, truth="auto") -> EvalResult:
    """Adapt on each held-out environment's adaptation data, then test there."""
    if dataset.spec is None:
        raise InvalidArgumentError("out-of-domain evaluation needs the dataset spec")
    if not dataset.heldout_env_ids:
        raise InvalidArgumentError("dataset has no held-out environment")
    traces, coeff_list = [], []
    failed = False
    for env_id in dataset.heldout_env_ids:
        try:
            c = adapt_coefficients(model, dataset.adaptation[env_id], seed)
        except DynoDiscoError as err:
            log.warning("adaptation failed on env %s: %s", env_id, err)
            failed = True
            continue
        coeff_list.append(c)
        traces += _traces(model, model.mask, c, env_id, dataset.test[env_id])
    if failed:
        total = interp = extrap = np.inf
    else:
        total, interp, extrap = _split_errors(traces, dataset.spec.train.horizon)
    prec, rec = _precision_recall(model, dataset, coeff_list or [np.zeros(model.mask.shape)],
                                  truth)
    rec_ = EvalRecord(dataset.kind.value, model.method, "out-of-domain", total, interp, extrap,
                      prec, rec, runtime_s)
    return EvalResult(rec_, traces)


# -- fitting by method name ---------------------------------------------------

def fit_method(method, dataset: Dataset, hyper: Hyperparams = Hyperparams(), seed=0, lib=None,
               init_coeffs=None, progress=None) -> SpremeModel:
    lib = lib or default_library(dataset.kind)
    hyper = hyper.for_system(dataset.kind)
    if init_coeffs is None:
        init_coeffs = init_coefficients(dataset, lib, hyper)
    if method == "spreme":
        return train(dataset, lib, hyper, seed, init_coeffs=init_coeffs, progress=progress)
    if method == "sindy":
        return sindy_model(dataset, lib, hyper, coeffs=init_coeffs)
    if method in ("sindy-intersection", "sindy-union"):
        return baseline_model(method.split("-")[1], dataset, lib, hyper, coeffs=init_coeffs)
    raise InvalidArgumentError(f"unknown method {method!r}")


# -- report files -------------------------------------------------------------

def write_report(path, records, extra_columns=()):
    """CSV with the standard report columns, optionally preceded by sweep keys."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra_columns) + list(REPORT_COLUMNS))
        for r in records:
            keys, rec = (r if isinstance(r, tuple) else ((), r))
            w.writerow([_fmt(k) for k in keys] + rec.row())


def read_report(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_predictions(path, trace: PredictionTrace):
    n = trace.truth.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"true_{i}" for i in range(n)] + [f"pred_{i}" for i in range(n)])
        for t, x, y in zip(trace.times, trace.truth, trace.pred):
            w.writerow([f"{t:.17g}"] + [_fmt(float(v)) for v in x] + [_fmt(float(v)) for v in y])


# -- sweeps -------------------------------------------------------------------

@dataclass
class SweepRow:
    key: tuple
    record: EvalRecord | None
    status: str = "ok"
    extra: dict = field(default_factory=dict)


def _as_spec(kind_or_spec) -> DatasetSpec:
    if isinstance(kind_or_spec, DatasetSpec):
        return kind_or_spec
    return BENCHMARK_SPECS[SystemKind.parse(kind_or_spec)]


def _variance_cell(args):
    spec, variance, method, seed, hyper = args
    try:
        ds = build_dataset(spec.with_overrides(variance=variance), seed)
        model = fit_method(method, ds, hyper, seed)
        res = evaluate_out_of_domain(model, ds, seed)
        return SweepRow((variance,), res.record)
    except DynoDiscoError as err:
        return SweepRow((variance,), None, f"failed: {err}")


def _run_cells(fn, cells, jobs):
    if jobs <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, cells))


def variance_sweep(kind, variances, methods, seed=0, hyper: Hyperparams = Hyperparams(),
                   jobs=1) -> list[SweepRow]:
    """Out-of-domain records for every (variance, method) cell; failures are kept as rows.

    ``kind`` is a system name (benchmark dataset layout) or a full ``DatasetSpec``.
    """
    spec = _as_spec(kind)
    if not variances or not methods:
        raise InvalidArgumentError("variance sweep needs at least one variance and method")
    if any(v <= 0 for v in variances):
        raise InvalidArgumentError("variances must be positive")
    cells = [(spec, float(v), m, seed, hyper) for v in variances for m in methods]
    rows = _run_cells(_variance_cell, cells, jobs)
    for row, (_, _, m, _, _) in zip(rows, cells):
        row.extra["method"] = m
    return rows


def _horizon_cell(args):
    spec, eta, seed, hyper = args
    try:
        ds = build_dataset(spec, seed)
        lib = default_library(spec.kind)
        init = init_coefficients(ds, lib, hyper)
        steps0 = rk4_steps.count
        t0 = time.perf_counter()
        model = train(ds, lib, replace(hyper, eta_mask=int(eta)), seed, init_coeffs=init)
        seconds = time.perf_counter() - t0
        steps = rk4_steps.count - steps0
        res = evaluate_out_of_domain(model, ds, seed)
        return SweepRow((int(eta),), res.record, extra={"train_seconds": seconds,
                                                        "rk4_steps": steps})
    except DynoDiscoError as err:
        return SweepRow((int(eta),), None, f"failed: {err}")


def horizon_sweep(kind, etas, seed=0, hyper: Hyperparams = Hyperparams(),
                  jobs=1) -> list[SweepRow]:
    """Train with each mask-loss horizon; record adaptation MSE, time and solver steps."""
    spec = _as_spec(kind)
    if not etas:
        raise InvalidArgumentError("horizon sweep needs at least one eta")
    if any(int(e) < 1 for e in etas):
        raise InvalidArgumentError("etas must be >= 1")
    return _run_cells(_horizon_cell, [(spec, int(e), seed, hyper) for e in etas], jobs)


SWEEP_COLUMNS = {
    "variance": ("variance", "method", "mse_total", "mse_interp", "mse_extrap", "precision",
                 "recall", "status"),
    "horizon": ("eta", "mse_total", "train_seconds", "rk4_steps", "status"),
}


def write_sweep(path, kind, rows, record_runtime=False):
    """One CSV row per cell.  Timing columns stay empty unless ``record_runtime``."""
    cols = SWEEP_COLUMNS[kind]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            rec = row.record
            vals = {"variance": row.key[0] if kind == "variance" else None,
                    "eta": row.key[0] if kind == "horizon" else None,
                    "method": row.extra.get("method", rec.method if rec else ""),
                    "status": row.status,
                    "train_seconds": row.extra.get("train_seconds") if record_runtime else None,
                    "rk4_steps": row.extra.get("rk4_steps")}
            for c in ("mse_total", "mse_interp", "mse_extrap", "precision", "recall"):
                vals[c] = getattr(rec, c) if rec else None
            w.writerow([_fmt(vals[c]) for c in cols])
