"""Per-environment SINDy and the intersection / union mask baselines."""

from __future__ import annotations

import enum

import numpy as np

from .core import Hyperparams, SpremeModel, init_coefficients
from .errors import InvalidArgumentError
from .library import FeatureLibrary
from .systems import Dataset


class MaskRule(str, enum.Enum):
    INTERSECTION = "intersection"
    UNION = "union"


METHODS = ("spreme", "sindy", "sindy-intersection", "sindy-union")


def _supports(coeffs):
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim != 3 or coeffs.shape[0] < 1:
        raise InvalidArgumentError("coefficients must have shape (E, n, p) with E >= 1")
    return coeffs != 0


def intersection_mask(coeffs) -> np.ndarray:
    """1 where every environment kept the term."""
    return _supports(coeffs).all(axis=0).astype(int)


def union_mask(coeffs) -> np.ndarray:
    """1 where at least one environment kept the term."""
    return _supports(coeffs).any(axis=0).astype(int)


def mask_to_relaxed(mask) -> np.ndarray:
    # logit 0 for kept entries; the binary mask is all that baselines use
    return np.where(np.asarray(mask) == 1, 0.0, -np.inf)


def baseline_model(rule, dataset: Dataset, lib: FeatureLibrary,
                   hyper: Hyperparams = Hyperparams(), coeffs=None) -> SpremeModel:
    """Aggregate per-environment SINDy supports into one frozen mask."""
    rule = MaskRule(rule)
    hyper = hyper.for_system(dataset.kind)
    if coeffs is None:
        coeffs = init_coefficients(dataset, lib, hyper)
    coeffs = np.asarray(coeffs, dtype=float)
    mask = intersection_mask(coeffs) if rule is MaskRule.INTERSECTION else union_mask(coeffs)
    return SpremeModel(lib, mask_to_relaxed(mask), coeffs, list(dataset.train_env_ids), hyper,
                       [], f"sindy-{rule.value}", 0)


def sindy_model(dataset: Dataset, lib: FeatureLibrary, hyper: Hyperparams = Hyperparams(),
                coeffs=None) -> SpremeModel:
    """Independent per-environment fits; sparsity lives in the coefficients alone."""
    hyper = hyper.for_system(dataset.kind)
    if coeffs is None:
        coeffs = init_coefficients(dataset, lib, hyper)
    coeffs = np.asarray(coeffs, dtype=float)
    mask = np.ones((lib.n, lib.p), dtype=int)
    return SpremeModel(lib, mask_to_relaxed(mask), coeffs, list(dataset.train_env_ids), hyper,
                       [], "sindy", 0)
