"""Single-environment sparse regression (sequential thresholded least squares)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InitializationError, InvalidArgumentError
from .library import FeatureLibrary

DEFAULT_THRESHOLDS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
RIDGE = 1e-10


class EmptySupportWarning(UserWarning):
    """Every column of some output dimension was pruned."""


@dataclass(frozen=True)
class StlsqConfig:
    prune_threshold: float = 0.05
    l1_weight: float = 0.0
    max_rounds: int = 10

    def __post_init__(self):
        if self.prune_threshold < 0 or self.l1_weight < 0:
            raise InvalidArgumentError("threshold and l1 weight must be >= 0")
        if self.max_rounds < 1:
            raise InvalidArgumentError("max_rounds must be >= 1")


def estimate_derivatives(states, dt) -> np.ndarray:
    """Second-order finite differences: central inside, one-sided 3-point at the ends."""
    X = np.asarray(states, dtype=float)
    if X.shape[0] < 3:
        raise InvalidArgumentError("need at least 3 samples to estimate derivatives")
    D = np.empty_like(X)
    D[1:-1] = (X[2:] - X[:-2]) / (2.0 * dt)
    D[0] = (-3.0 * X[0] + 4.0 * X[1] - X[2]) / (2.0 * dt)
    D[-1] = (3.0 * X[-1] - 4.0 * X[-2] + X[-3]) / (2.0 * dt)
    return D


def _ridge_lstsq(A, y):
    # column-scaled ridge least squares, solved as an augmented system
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    k = As.shape[1]
    aug = np.vstack([As, np.sqrt(RIDGE) * np.eye(k)])
    rhs = np.concatenate([y, np.zeros(k)])
    w, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
    return w / scale


def _prox_l1(A, y, l1, w0, iters=2000, tol=1e-12):
    # ISTA on ||y - A w||^2 + l1 ||w||_1
    L = 2.0 * np.linalg.norm(A, 2) ** 2
    if L == 0:
        return np.zeros_like(w0)
    w = w0.copy()
    for _ in range(iters):
        g = 2.0 * A.T @ (A @ w - y)
        z = w - g / L
        w_new = np.sign(z) * np.maximum(np.abs(z) - l1 / L, 0.0)
        if np.max(np.abs(w_new - w)) <= tol * max(1.0, np.max(np.abs(w))):
            return w_new
        w = w_new
    return w


def stlsq_fit(features, derivs, cfg: StlsqConfig = StlsqConfig(), return_history=False):
    """Sparse coefficients Ξ (n x p) with ``derivs ≈ features @ Ξ.T``.

    Alternates a (ridge-damped) least-squares fit over the active columns with
    hard pruning of coefficients below ``cfg.prune_threshold``; pruned columns
    never re-enter.
    """
    Theta = np.asarray(features, dtype=float)
    dX = np.asarray(derivs, dtype=float)
    if Theta.ndim != 2 or dX.ndim != 2 or Theta.shape[0] != dX.shape[0]:
        raise InvalidArgumentError("features (m x p) and derivatives (m x n) must share m")
    m, p = Theta.shape
    n = dX.shape[1]
    Xi = np.zeros((n, p))
    history = []
    for k in range(n):
        active = np.ones(p, dtype=bool)
        supports = [active.copy()]
        w = np.zeros(p)
        for _ in range(cfg.max_rounds):
            if not active.any():
                break
            A = Theta[:, active]
            wa = _ridge_lstsq(A, dX[:, k])
            if cfg.l1_weight > 0:
                wa = _prox_l1(A, dX[:, k], cfg.l1_weight, wa)
            w = np.zeros(p)
            w[active] = wa
            keep = active & (np.abs(w) >= cfg.prune_threshold)
            w[~keep] = 0.0
            converged = np.array_equal(keep, active)
            active = keep
            supports.append(active.copy())
            if converged:
                break
        if not active.any():
            warnings.warn(f"all candidate terms pruned for dimension {k}", EmptySupportWarning,
                          stacklevel=2)
            w = np.zeros(p)
        Xi[k] = w
        history.append(supports)
    if return_history:
        return Xi, history
    return Xi


def stack_regression_data(series, lib: FeatureLibrary):
    """Features and finite-difference derivatives stacked over ``(states, dt)`` pairs."""
    feats, ders = [], []
    for states, dt in series:
        feats.append(lib.evaluate(states))
        ders.append(estimate_derivatives(states, dt))
    return np.vstack(feats), np.vstack(ders)


def fit_environment(trajs, lib: FeatureLibrary, thresholds=DEFAULT_THRESHOLDS, *,
                    l1_weight=0.0, max_rounds=10, val_frac=0.8, substeps=1,
                    return_scores=False):
    """Pick the STLSQ threshold whose fit extrapolates best on the held-out tail.

    Each trajectory is split at ``v = floor(val_frac * m)``; the fit uses the
    first ``v`` samples and is scored by the rollout error over the rest.
    """
    from .core import split_point, validation_loss  # local: core depends on this module

    if not trajs:
        raise InvalidArgumentError("fit_environment needs at least one trajectory")
    if not len(thresholds):
        raise InvalidArgumentError("threshold grid is empty")
    train_series = []
    for tr in trajs:
        v = split_point(tr.m, val_frac)
        train_series.append((tr.states[:v], tr.dt))
    Theta, dX = stack_regression_data(train_series, lib)
    ones = np.ones((lib.n, lib.p))
    best, best_score, scores = None, np.inf, []
    for thr in thresholds:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptySupportWarning)
            Xi = stlsq_fit(Theta, dX, StlsqConfig(thr, l1_weight, max_rounds))
        score = validation_loss(lib, ones, [Xi], [list(trajs)], val_frac=val_frac,
                                substeps=substeps)
        scores.append(score)
        if score < best_score:
            best, best_score = Xi, score
    if best is None:
        raise InitializationError("every STLSQ candidate diverged on validation")
    if return_scores:
        return best, scores
    return best
