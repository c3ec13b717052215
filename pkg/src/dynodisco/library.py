"""Candidate feature library: monomials up to a degree plus optional sine terms."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .errors import InvalidArgumentError

TRIG_TAGS = ("sin(x1)", "sin(x2)", "sin(x1+x2)")

DEFAULT_VAR_NAMES = {2: ("x1", "x2"), 3: ("x", "y", "z")}


@dataclass(frozen=True)
class Monomial:
    exponents: tuple[int, ...]

    @property
    def degree(self):
        return sum(self.exponents)


@dataclass(frozen=True)
class Trig:
    tag: str

    def __post_init__(self):
        if self.tag not in TRIG_TAGS:
            raise InvalidArgumentError(f"unknown trig term {self.tag!r}")


def monomial_exponents(n, degree):
    """All exponent vectors of total degree <= ``degree``, graded-lex, constant first."""
    out = []
    for d in range(degree + 1):
        for combo in combinations_with_replacement(range(n), d):
            e = [0] * n
            for j in combo:
                e[j] += 1
            out.append(tuple(e))
    return out


def term_name(term, var_names) -> str:
    if isinstance(term, Trig):
        a, b = var_names[0], var_names[1]
        return {"sin(x1)": f"sin({a})", "sin(x2)": f"sin({b})",
                "sin(x1+x2)": f"sin({a}+{b})"}[term.tag]
    if len(var_names) != len(term.exponents):
        raise InvalidArgumentError("var_names length must match the state dimension")
    parts = []
    for name, k in zip(var_names, term.exponents):
        if k == 1:
            parts.append(name)
        elif k > 1:
            parts.append(f"{name}^{k}")
    return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class FeatureLibrary:
    n: int
    degree: int
    include_trig: bool = False
    terms: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n not in (2, 3):
            raise InvalidArgumentError(f"state dimension must be 2 or 3, got {self.n}")
        if self.degree < 1:
            raise InvalidArgumentError("degree must be >= 1")
        if self.include_trig and self.n != 2:
            raise InvalidArgumentError("trigonometric terms are only defined for n = 2")
        terms = [Monomial(e) for e in monomial_exponents(self.n, self.degree)]
        if self.include_trig:
            terms += [Trig(t) for t in TRIG_TAGS]
        object.__setattr__(self, "terms", tuple(terms))
        exps = np.array([t.exponents for t in terms if isinstance(t, Monomial)], dtype=int)
        object.__setattr__(self, "_exponents", exps)

    @property
    def p(self):
        return len(self.terms)

    @property
    def n_monomials(self):
        return comb(self.n + self.degree, self.degree)

    @property
    def exponents(self):
        return self._exponents

    def names(self, var_names=None):
        var_names = var_names or DEFAULT_VAR_NAMES[self.n]
        return [term_name(t, var_names) for t in self.terms]

    def index_of(self, term):
        return self.terms.index(term)

    # -- evaluation -------------------------------------------------------

    def _factors(self, x):
        # per variable d: x_d ** E[:, d] and its derivative, each (..., q)
        E = self._exponents
        powers = np.empty(x.shape + (self.degree + 1,))  # (..., n, degree+1)
        powers[..., 0] = 1.0
        for k in range(1, self.degree + 1):
            powers[..., k] = powers[..., k - 1] * x
        out = []
        for d in range(self.n):
            pw = powers[..., d, :]
            g = np.take(pw, E[:, d], axis=-1)
            dg = E[:, d] * np.take(pw, np.maximum(E[:, d] - 1, 0), axis=-1)
            out.append((g, dg))
        return out

    def _trig(self, x):
        return np.stack([np.sin(x[..., 0]), np.sin(x[..., 1]), np.sin(x[..., 0] + x[..., 1])],
                        axis=-1)

    def evaluate(self, x) -> np.ndarray:
        """Feature vector(s) Φ(x); ``x`` has shape (..., n), result (..., p)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise InvalidArgumentError(f"state dimension {x.shape[-1]} != library n={self.n}")
        fac = self._factors(x)
        phi = fac[0][0]
        for g, _ in fac[1:]:
            phi = phi * g
        if self.include_trig:
            phi = np.concatenate([phi, self._trig(x)], axis=-1)
        return phi

    def evaluate_with_jacobian(self, x):
        """Return (Φ(x), dΦ/dx) with shapes (..., p) and (..., p, n)."""
        x = np.asarray(x, dtype=float)
        fac = self._factors(x)
        if self.n == 2:
            (g0, d0), (g1, d1) = fac
            phi = g0 * g1
            jac = np.stack([d0 * g1, g0 * d1], axis=-1)
        else:
            (g0, d0), (g1, d1), (g2, d2) = fac
            g12 = g1 * g2
            phi = g0 * g12
            jac = np.stack([d0 * g12, g0 * d1 * g2, g0 * g1 * d2], axis=-1)
        if self.include_trig:
            s0, s1 = np.sin(x[..., 0]), np.sin(x[..., 1])
            c0, c1 = np.cos(x[..., 0]), np.cos(x[..., 1])
            s01, c01 = np.sin(x[..., 0] + x[..., 1]), np.cos(x[..., 0] + x[..., 1])
            zero = np.zeros_like(c0)
            phi = np.concatenate([phi, np.stack([s0, s1, s01], axis=-1)], axis=-1)
            tj = np.stack([np.stack([c0, zero], -1), np.stack([zero, c1], -1),
                           np.stack([c01, c01], -1)], axis=-2)
            jac = np.concatenate([jac, tj], axis=-2)
        return phi, jac

    # -- serialization ----------------------------------------------------

    def descriptor(self) -> dict:
        return {
            "n": self.n,
            "degree": self.degree,
            "include_trig": self.include_trig,
            "terms": [list(t.exponents) if isinstance(t, Monomial) else t.tag
                      for t in self.terms],
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "FeatureLibrary":
        lib = cls(int(desc["n"]), int(desc["degree"]), bool(desc["include_trig"]))
        if "terms" in desc and lib.descriptor()["terms"] != desc["terms"]:
            raise InvalidArgumentError("library descriptor term list does not match its ordering")
        return lib


def build_library(n, degree=5, include_trig=False) -> FeatureLibrary:
    return FeatureLibrary(n, degree, include_trig)


def eval_features(lib: FeatureLibrary, state) -> np.ndarray:
    return lib.evaluate(state)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def effective_weights(mask, coeffs, relaxed=False):
    """Entrywise product of the (binary or sigmoid-relaxed) mask and coefficients."""
    mask = np.asarray(mask, dtype=float)
    gate = sigmoid(mask) if relaxed else mask
    return gate * np.asarray(coeffs, dtype=float)


def model_rhs(mask, coeffs, lib: FeatureLibrary, relaxed=False):
    """Right-hand side x -> (M∘Ξ)Φ(x).

    With ``relaxed=True`` the mask holds logits and σ(mask) gates the
    coefficients; otherwise it holds 0/1 entries.
    """
    mask = np.asarray(mask, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    if mask.shape != (lib.n, lib.p) or coeffs.shape != (lib.n, lib.p):
        raise InvalidArgumentError(
            f"mask {mask.shape} and coefficients {coeffs.shape} must both be {(lib.n, lib.p)}")
    W = effective_weights(mask, coeffs, relaxed)

    def rhs(x, t=0.0):
        return lib.evaluate(x) @ W.T

    return rhs
