"""Shared-mask sparse regression across environments.

A single relaxed mask (logits, pruned entries at -inf) is shared by every
environment while each environment keeps its own coefficient matrix.  Both
are fitted by alternating gradient steps whose losses compare RK4 rollouts
of ``(M ∘ Ξ_e) Φ(x)`` with the observations.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.optimize import minimize

from .errors import AdaptationError, InvalidArgumentError, TrainingError
from .library import FeatureLibrary, sigmoid
from .rollout import Rollout, build_segments, huber
from .sindy import DEFAULT_THRESHOLDS, _ridge_lstsq, fit_environment, stack_regression_data
from .systems import DEFAULT_MAX_STEP, Dataset, SystemKind, Trajectory, substream

log = logging.getLogger(__name__)

MAX_HALVINGS = 10
OPTIMIZERS = ("lm", "lbfgs", "adam")


class ConstantLossWarning(UserWarning):
    pass


GENERIC_MAX_STEP = 0.05


def _resolve(hyper, data):
    return hyper.for_system(data.kind) if isinstance(data, Dataset) else hyper


@dataclass(frozen=True)
class Hyperparams:
    lam: float = 0.01
    s: float = 0.02
    alpha_xi: float = 1e-2
    alpha_m: float = 1e-1
    kappa_xi: float = 0.005
    kappa_m: float = 0.05
    eta_coeff: int = 1
    eta_mask: int | None = None  # None: full rollout over the training window
    outer_iters: int = 300
    patience: int | None = 50  # stop after this many iterations without a prune or a 0.1% val gain
    init_alpha: float = 0.7
    huber_delta: float = 1.0
    inner_steps: int = 1
    coeff_inner_steps: int | None = 20  # None: same as inner_steps
    xi_optimizer: str = "lm"
    refit_on_prune: bool = True
    val_frac: float = 0.8
    substeps: int | None = None  # None: smallest count keeping the RK4 step <= max_step
    max_step: float | None = None  # None: the system's default, GENERIC_MAX_STEP otherwise
    anchor_rule: str = "floor"
    thresholds: tuple = DEFAULT_THRESHOLDS
    adapt_optimizer: str = "lm"
    adapt_max_steps: int = 20000
    adapt_init_var: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.kappa_m < 1.0:
            raise InvalidArgumentError("kappa_m must lie in (0, 1)")
        if not 0.0 < self.init_alpha < 1.0:
            raise InvalidArgumentError("init_alpha must lie in (0, 1)")
        if self.eta_coeff < 1 or (self.eta_mask is not None and self.eta_mask < 1):
            raise InvalidArgumentError("prediction horizons must be >= 1")
        if self.lam < 0 or self.s < 0 or self.kappa_xi < 0:
            raise InvalidArgumentError("lam, s and kappa_xi must be >= 0")
        if self.max_step is not None and self.max_step <= 0:
            raise InvalidArgumentError("max_step must be > 0")
        if (self.outer_iters < 0 or self.inner_steps < 1
                or (self.substeps is not None and self.substeps < 1)
                or (self.coeff_inner_steps is not None and self.coeff_inner_steps < 1)):
            raise InvalidArgumentError("invalid iteration counts")
        if self.patience is not None and self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        if self.adapt_optimizer not in OPTIMIZERS or self.xi_optimizer not in OPTIMIZERS:
            raise InvalidArgumentError(f"optimizers must be one of {OPTIMIZERS}")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))

    def substeps_for(self, dt):
        """RK4 substeps per grid interval of length ``dt``."""
        if self.substeps is not None:
            return self.substeps
        step = GENERIC_MAX_STEP if self.max_step is None else self.max_step
        return max(1, math.ceil(float(dt) / step - 1e-9))

    def for_system(self, kind) -> "Hyperparams":
        """Fill an unset ``max_step`` with the system's default."""
        if self.max_step is not None or kind is None:
            return self
        return replace(self, max_step=DEFAULT_MAX_STEP[SystemKind.parse(kind)])

    @property
    def coeff_steps(self):
        return self.inner_steps if self.coeff_inner_steps is None else self.coeff_inner_steps

    def to_dict(self):
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


# -- masks and pruning ------------------------------------------------------

def quantize_mask(relaxed) -> np.ndarray:
    """0 exactly where the logit is -inf, 1 elsewhere."""
    relaxed = np.asarray(relaxed, dtype=float)
    return (~np.isneginf(relaxed)).astype(int)


def logit(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


def init_relaxed_mask(coeffs, init_alpha=0.7) -> np.ndarray:
    """Logit of ``init_alpha`` times the fraction of environments using each term."""
    if not 0.0 < init_alpha < 1.0:
        raise InvalidArgumentError("init_alpha must lie in (0, 1)")
    coeffs = np.asarray(coeffs, dtype=float)
    frac = (coeffs != 0).sum(axis=0) / coeffs.shape[0]
    return logit(init_alpha * frac)


def prune_coefficients(coeffs, kappa_xi) -> np.ndarray:
    if kappa_xi < 0:
        raise InvalidArgumentError("kappa_xi must be >= 0")
    out = np.array(coeffs, dtype=float)
    out[np.abs(out) < kappa_xi] = 0.0
    return out


def prune_relaxed_mask(relaxed, kappa_m, coeffs=None) -> np.ndarray:
    """Send entries with σ(M̃) < kappa_m, or unused by every environment, to -inf."""
    if kappa_m < 0:
        raise InvalidArgumentError("kappa_m must be >= 0")
    out = np.array(relaxed, dtype=float)
    out[sigmoid(out) < kappa_m] = -np.inf
    if coeffs is not None:
        dead = np.all(np.asarray(coeffs) == 0, axis=0)
        out[dead] = -np.inf
    return out


def split_point(m, frac=0.8):
    """Number of leading samples used for fitting; the rest validate."""
    v = int(math.floor(frac * m))
    if m < 5 or v < 3 or v >= m:
        raise InvalidArgumentError(f"cannot split a trajectory of {m} points at fraction {frac}")
    return v


def _series(trajs_by_env, sl=None):
    out = []
    for e, trajs in enumerate(trajs_by_env):
        for tr in trajs:
            st = tr.states if isinstance(tr, Trajectory) else np.asarray(tr[0])
            dt = tr.dt if isinstance(tr, Trajectory) else float(tr[1])
            out.append((e, st if sl is None else sl(st), dt))
    return out


def _env_lists(data):
    """Normalize a Dataset / dict / list input to a list of per-environment lists."""
    if isinstance(data, Dataset):
        return [data.train[e] for e in data.train_env_ids]
    if isinstance(data, dict):
        return [data[k] for k in sorted(data)]
    if data and isinstance(data[0], Trajectory):
        return [list(data)]
    return [list(x) for x in data]


def validation_loss(lib: FeatureLibrary, mask, coeffs, trajs_by_env, val_frac=0.8, substeps=1,
                    relaxed=False):
    """Mean squared error of a continuous rollout over each trajectory's tail.

    The rollout starts at the last fitting sample (index ``v - 1``) and covers
    indices ``v .. m - 1``.  Non-finite rollouts give ``inf``.
    """
    trajs_by_env = _env_lists(trajs_by_env)
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim == 2:
        coeffs = coeffs[None]
    gate = sigmoid(np.asarray(mask, float)) if relaxed else np.asarray(mask, float)
    series = []
    for e, trajs in enumerate(trajs_by_env):
        for tr in trajs:
            v = split_point(tr.m, val_frac)
            series.append((e, tr.states[v - 1:], tr.dt))
    longest = max(s.shape[0] for _, s, _ in series)
    batch = build_segments(series, eta=longest)
    ro = Rollout(lib, batch, len(trajs_by_env), substeps)
    sq = ro.loss(gate * coeffs, kind="sq")
    return sq / (batch.n_scored * lib.n)


# -- objective --------------------------------------------------------------

class Objective:
    """Coefficient and mask losses (and exact gradients) over fitting windows.

    ``trajs_by_env`` holds one list of trajectories per environment.  With
    ``use_split`` the losses only see the first ``v`` samples of each
    trajectory, leaving the tail for validation.
    """

    def __init__(self, lib: FeatureLibrary, trajs_by_env, hyper: Hyperparams = Hyperparams(),
                 use_split=True):
        self.lib = lib
        self.hyper = hyper
        self.trajs_by_env = _env_lists(trajs_by_env)
        self.n_env = len(self.trajs_by_env)
        if self.n_env == 0:
            raise InvalidArgumentError("need at least one environment")
        frac = hyper.val_frac

        def window(st):
            return st[:split_point(st.shape[0], frac)] if use_split else st

        series = _series(self.trajs_by_env, window)
        self.substeps = hyper.substeps_for(max(dt for _, _, dt in series))
        longest = max(s.shape[0] for _, s, _ in series) - 1
        eta_m = longest if hyper.eta_mask is None else min(hyper.eta_mask, max(longest, 1))
        self.coeff_rollout = Rollout(lib, build_segments(series, hyper.eta_coeff, hyper.anchor_rule),
                                     self.n_env, self.substeps)
        self.mask_rollout = Rollout(lib, build_segments(series, eta_m, hyper.anchor_rule),
                                    self.n_env, self.substeps)
        self.regression = None  # per-environment (features, derivatives), built on demand
        self.scales = None

    # coefficient loss: Huber through the binary-masked model
    def coefficient_loss(self, coeffs, mask):
        W = np.asarray(mask, float) * np.asarray(coeffs, float)
        return self.coeff_rollout.loss(W, "huber", self.hyper.huber_delta)

    def coefficient_loss_and_grad(self, coeffs, mask):
        mask = np.asarray(mask, float)
        loss, gW = self.coeff_rollout.loss_and_grad(mask * np.asarray(coeffs, float), "huber",
                                                     self.hyper.huber_delta)
        if gW is None:
            return np.inf, None
        return loss, gW * mask

    def per_env_coefficient_loss(self, coeffs, mask):
        """Coefficient loss split by environment; non-finite entries are inf."""
        ro = self.coeff_rollout
        b = ro.batch
        preds, _ = ro.forward(np.asarray(mask, float) * np.asarray(coeffs, float))
        with np.errstate(all="ignore"):
            r = np.where(b.scored[:, :, None], preds - b.targets, 0.0)
            h = huber(r, self.hyper.huber_delta).sum(axis=(1, 2))
        out = np.zeros(self.n_env)
        np.add.at(out, b.env_index, h)
        out[~np.isfinite(out)] = np.inf
        return out

    # mask loss: squared error through the sigmoid-gated model plus scheduled L1
    def penalty_weight(self, tau):
        return self.hyper.lam * (1.0 + self.hyper.s) ** tau

    def regularizer(self, relaxed, tau):
        return self.penalty_weight(tau) * self.n_env * float(sigmoid(relaxed).sum())

    def mask_loss(self, relaxed, coeffs, tau):
        relaxed = np.asarray(relaxed, float)
        data = self.mask_rollout.loss(sigmoid(relaxed) * np.asarray(coeffs, float), "sq")
        return data + self.regularizer(relaxed, tau)

    def mask_loss_and_grad(self, relaxed, coeffs, tau):
        relaxed = np.asarray(relaxed, float)
        coeffs = np.asarray(coeffs, float)
        gate = sigmoid(relaxed)
        data, gW = self.mask_rollout.loss_and_grad(gate * coeffs, "sq")
        if gW is None:
            return np.inf, None
        dgate = (gW * coeffs).sum(axis=0)
        dsig = gate * (1.0 - gate)
        grad = (dgate + self.penalty_weight(tau) * self.n_env) * dsig
        grad[np.isneginf(relaxed)] = 0.0
        return data + self.regularizer(relaxed, tau), grad

    def validation_loss(self, mask, coeffs):
        return validation_loss(self.lib, mask, coeffs, self.trajs_by_env, self.hyper.val_frac,
                               self.substeps)


def coefficient_loss(coeffs, mask, data, lib, hyper=Hyperparams(), use_split=False):
    return Objective(lib, data, hyper, use_split).coefficient_loss(coeffs, mask)


def mask_loss(relaxed, coeffs, data, lib, tau, hyper=Hyperparams(), use_split=False):
    return Objective(lib, data, hyper, use_split).mask_loss(relaxed, coeffs, tau)


def grad_coefficients(coeffs, mask, data, lib, hyper=Hyperparams(), use_split=False):
    return Objective(lib, data, hyper, use_split).coefficient_loss_and_grad(coeffs, mask)[1]


def grad_mask(relaxed, coeffs, data, lib, tau, hyper=Hyperparams(), use_split=False):
    return Objective(lib, data, hyper, use_split).mask_loss_and_grad(relaxed, coeffs, tau)[1]


def predict_states(mask, coeffs, traj: Trajectory, lib: FeatureLibrary, eta=1, relaxed=False,
                   substeps=1) -> np.ndarray:
    """Per-index predictions: index j is rolled out from anchor ``eta*floor((j-1)/eta)``."""
    gate = sigmoid(np.asarray(mask, float)) if relaxed else np.asarray(mask, float)
    W = (gate * np.asarray(coeffs, float))[None]
    batch = build_segments([(0, traj.states, traj.dt)], eta)
    preds, _ = Rollout(lib, batch, 1, substeps).forward(W)
    out = np.empty_like(traj.states)
    out[0] = traj.states[0]
    act = batch.active
    out[batch.target_index[act]] = preds[act]
    return out


def rollout(mask, coeffs, x0, times, lib: FeatureLibrary, substeps=1) -> np.ndarray:
    """Single continuous RK4 rollout from ``x0`` over a uniform time grid."""
    times = np.asarray(times, float)
    dt = float((times[-1] - times[0]) / (times.size - 1))
    dummy = np.zeros((times.size, lib.n))
    dummy[0] = x0
    batch = build_segments([(0, dummy, dt)], times.size)
    W = (np.asarray(mask, float) * np.asarray(coeffs, float))[None]
    preds, _ = Rollout(lib, batch, 1, substeps).forward(W)
    out = np.empty_like(dummy)
    out[0] = x0
    out[1:] = preds[0, : times.size - 1]
    return out


# -- optimizer --------------------------------------------------------------

class Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad, frozen=None):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if frozen is not None:
            upd = np.where(frozen, 0.0, upd)
        return params - upd


# -- model ------------------------------------------------------------------

@dataclass
class SpremeModel:
    lib: FeatureLibrary
    relaxed: np.ndarray
    coeffs: np.ndarray           # (E, n, p)
    env_ids: list
    hyper: Hyperparams = field(default_factory=Hyperparams)
    train_report: list = field(default_factory=list)
    method: str = "spreme"
    best_iter: int = 0

    @property
    def mask(self):
        return quantize_mask(self.relaxed)

    def coeffs_for(self, env_id):
        return self.coeffs[self.env_ids.index(env_id)]

    def weights_for(self, env_id):
        return self.mask * self.coeffs_for(env_id)

    def rhs_for(self, env_id):
        from .library import model_rhs
        return model_rhs(self.mask, self.coeffs_for(env_id), self.lib)


def init_coefficients(data, lib: FeatureLibrary, hyper: Hyperparams = Hyperparams()):
    """Per-environment STLSQ fits, stacked to shape (E, n, p)."""
    envs = _env_lists(data)
    if not envs:
        raise InvalidArgumentError("need at least one training environment")
    hyper = _resolve(hyper, data)
    return np.stack([fit_environment(trajs, lib, hyper.thresholds, val_frac=hyper.val_frac,
                                     substeps=hyper.substeps_for(trajs[0].dt)) for trajs in envs])


def train(dataset, lib: FeatureLibrary, hyper: Hyperparams = Hyperparams(), seed=0,
          init_coeffs=None, progress=None) -> SpremeModel:
    """Alternate coefficient and mask updates, keeping the best-validating snapshot."""
    hyper = _resolve(hyper, dataset)
    if isinstance(dataset, Dataset):
        env_ids = dataset.train_env_ids
    else:
        env_ids = list(range(len(_env_lists(dataset))))
    obj = Objective(lib, dataset, hyper, use_split=True)
    coeffs = init_coefficients(obj.trajs_by_env, lib, hyper) if init_coeffs is None \
        else np.array(init_coeffs, dtype=float)
    relaxed = init_relaxed_mask(coeffs, hyper.init_alpha)

    mask = quantize_mask(relaxed)
    c_loss = obj.coefficient_loss(coeffs, mask)
    m_loss = obj.mask_loss(relaxed, coeffs, 0)
    val = obj.validation_loss(mask, coeffs)
    if not np.isfinite(c_loss):
        raise TrainingError("initial coefficients produce a non-finite coefficient loss")
    report = [_report_row(0, c_loss, m_loss, val, relaxed)]
    best = (val, 0, relaxed.copy(), coeffs.copy())

    last_change = 0
    opt_xi = GuardedAdam(coeffs.shape, hyper.alpha_xi)
    opt_m = GuardedAdam(relaxed.shape, hyper.alpha_m)
    for tau in range(1, hyper.outer_iters + 1):
        mask = quantize_mask(relaxed)
        if hyper.xi_optimizer == "lm":
            coeffs, c_loss = _lm_coefficients(obj.coeff_rollout, coeffs, mask, hyper.coeff_steps,
                                              hyper.huber_delta)
        elif hyper.xi_optimizer == "lbfgs":
            coeffs, c_loss = _lbfgs_coefficients(obj, coeffs, mask, hyper.coeff_steps)
        else:
            for _ in range(hyper.coeff_steps):
                coeffs, c_loss = opt_xi.advance(
                    coeffs, lambda c: obj.coefficient_loss_and_grad(c, mask))
        coeffs = prune_coefficients(coeffs, hyper.kappa_xi)
        frozen = np.isneginf(relaxed)
        for _ in range(hyper.inner_steps):
            relaxed, m_loss = opt_m.advance(
                relaxed, lambda r: obj.mask_loss_and_grad(r, coeffs, tau), frozen=frozen)
        before = mask
        relaxed = prune_relaxed_mask(relaxed, hyper.kappa_m, coeffs)
        mask = quantize_mask(relaxed)
        if hyper.refit_on_prune and not np.array_equal(mask, before):
            coeffs = _refit_on_support(obj, coeffs, mask, hyper)
        val = obj.validation_loss(mask, coeffs)
        report.append(_report_row(tau, c_loss, m_loss, val, relaxed))
        if not np.array_equal(mask, before) or val < (1.0 - 1e-3) * best[0]:
            last_change = tau
        if val < best[0]:
            best = (val, tau, relaxed.copy(), coeffs.copy())
        if progress is not None:
            progress(report[-1])
        if hyper.patience is not None and tau - last_change >= hyper.patience:
            log.info("stopping at iteration %d: no prune or validation gain in %d iterations",
                     tau, hyper.patience)
            break
    _, best_iter, relaxed, coeffs = best
    return SpremeModel(lib, relaxed, coeffs, list(env_ids), hyper, report, "spreme", best_iter)


def _refit_on_support(obj: Objective, coeffs, mask, hyper: Hyperparams):
    """Least-squares refit of each environment restricted to the surviving mask entries.

    Keeps an environment's previous coefficients when the refit does not lower
    its one-step loss.
    """
    if obj.regression is None:
        obj.regression = [stack_regression_data(
            [(tr.states[:split_point(tr.m, hyper.val_frac)], tr.dt) for tr in trajs], obj.lib)
            for trajs in obj.trajs_by_env]
    mask = np.asarray(mask, bool)
    out = np.array(coeffs, dtype=float)
    cand = np.zeros_like(out)
    for e, (Theta, dX) in enumerate(obj.regression):
        for k in range(obj.lib.n):
            if mask[k].any():
                cand[e, k, mask[k]] = _ridge_lstsq(Theta[:, mask[k]], dX[:, k])
    cand = prune_coefficients(cand, hyper.kappa_xi)
    old = obj.per_env_coefficient_loss(out, mask)
    new = obj.per_env_coefficient_loss(cand, mask)
    better = new < old
    out[better] = cand[better]
    return out


def feature_scales(lib: FeatureLibrary, trajs_by_env) -> np.ndarray:
    """Root-mean-square of every feature over each environment's states, shape (E, 1, p)."""
    out = []
    for trajs in _env_lists(trajs_by_env):
        phi = lib.evaluate(np.vstack([tr.states for tr in trajs]))
        rms = np.sqrt(np.mean(phi * phi, axis=0))
        out.append(np.where(rms > 0, rms, 1.0))
    return np.stack(out)[:, None, :]


def _lbfgs(fg, init, free, scales, max_steps, callback=None):
    """L-BFGS over the ``free`` entries of ``init`` in feature-scaled variables.

    ``fg`` maps a full coefficient array to (loss, grad) or (inf, None).  The
    variables are ``coeff * scales`` so a unit step moves every term's
    contribution by a comparable amount.  Returns (coeffs, loss) at the best
    finite point, never worse than ``init``.
    """
    scales = np.broadcast_to(scales, init.shape)[free]

    def fun(theta):
        c = np.zeros(init.shape)
        c[free] = theta / scales
        loss, g = fg(c)
        if g is None:
            return 1e30, np.zeros_like(theta)
        return loss, g[free] / scales

    loss0, _ = fun(init[free] * scales)
    res = minimize(fun, init[free] * scales, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": max_steps, "ftol": 1e-16, "gtol": 1e-14, "maxcor": 30})
    out = np.zeros(init.shape)
    if res.fun < loss0:
        out[free] = res.x / scales
        return out, float(res.fun)
    out[free] = init[free]
    return out, float(loss0)


def _lbfgs_coefficients(obj: Objective, coeffs, mask, max_steps):
    """Warm-started quasi-Newton refit of every environment's masked coefficients."""
    free = np.broadcast_to(np.asarray(mask, bool), coeffs.shape)
    norm = 1.0 / max(obj.coeff_rollout.batch.n_scored, 1)
    if obj.scales is None:
        obj.scales = feature_scales(obj.lib, obj.trajs_by_env)

    def fg(c):
        loss, g = obj.coefficient_loss_and_grad(c, mask)
        return (np.inf, None) if g is None else (loss * norm, g * norm)

    if not np.isfinite(fg(coeffs)[0]):
        raise TrainingError("coefficient loss is non-finite before the refit")
    out, loss = _lbfgs(fg, np.asarray(coeffs, float), free, obj.scales, max_steps)
    return out, loss / norm


def _lm_coefficients(ro: Rollout, coeffs, mask, max_steps, delta=1.0, rtol=1e-12,
                     window=10, window_rtol=1e-2):
    """Levenberg-Marquardt on the Huber prediction loss, independently per environment.

    Each iteration linearizes the predictions with exact RK4 sensitivities,
    reweights residuals beyond ``delta`` (IRLS), and solves the damped
    least-squares system with Marquardt scaling.  A step is kept only if it
    lowers that environment's loss.  An environment stops once one iteration
    gains less than ``rtol`` or ``window`` iterations together gain less than
    ``window_rtol`` (relative).  Returns (coeffs, total loss).
    """
    W = np.array(coeffs, dtype=float)
    free = np.broadcast_to(np.asarray(mask, bool), W.shape)
    b = ro.batch
    E = W.shape[0]
    loss = ro.per_env_loss(W, "huber", delta)
    if not np.all(np.isfinite(loss)):
        raise TrainingError("coefficient loss is non-finite before the refit")
    mu = np.full(E, 1e-9)
    active = np.array([free[e].any() for e in range(E)])
    rows = [np.nonzero(b.env_index == e)[0] for e in range(E)]
    history = [loss.copy()]
    for _ in range(max_steps):
        if not active.any():
            break
        preds, sens = ro.forward_sensitivity(W)
        systems = {}
        for e in np.nonzero(active)[0]:
            sc = b.scored[rows[e]]
            r = (preds[rows[e]] - b.targets[rows[e]])[sc].reshape(-1)
            J = sens[rows[e]][sc].reshape(r.size, -1)[:, free[e].reshape(-1)]
            sw = np.sqrt(np.minimum(1.0, delta / np.maximum(np.abs(r), 1e-300)))
            J, r = J * sw[:, None], r * sw
            d = np.sqrt((J * J).sum(axis=0))
            d[d == 0] = 1.0
            systems[e] = (J, r, d)
        prev = loss.copy()
        for _attempt in range(16):
            trial = W.copy()
            for e, (J, r, d) in systems.items():
                A = np.vstack([J, np.sqrt(mu[e]) * np.diag(d)])
                rhs = np.concatenate([-r, np.zeros(d.size)])
                step, *_ = np.linalg.lstsq(A, rhs, rcond=None)
                trial[e][free[e]] += step
            new = ro.per_env_loss(trial, "huber", delta)
            pending = []
            for e in list(systems):
                if new[e] < loss[e]:
                    W[e] = trial[e]
                    loss[e] = new[e]
                    mu[e] = max(mu[e] / 10.0, 1e-12)
                    del systems[e]
                else:
                    mu[e] *= 10.0
                    pending.append(e)
            if not pending:
                break
        done = (prev - loss) <= rtol * np.maximum(prev, 1e-300)
        history.append(loss.copy())
        if len(history) > window:
            old = history[-window - 1]
            done |= (old - loss) <= window_rtol * np.maximum(old, 1e-300)
        active &= ~done
    return W, float(loss.sum())


def _report_row(tau, c_loss, m_loss, val, relaxed):
    return {"iter": tau, "coeff_loss": float(c_loss), "mask_loss": float(m_loss),
            "val_loss": float(val), "active": int(quantize_mask(relaxed).sum())}


class GuardedAdam(Adam):
    """Adam that retreats to its last finite iterate and halves the step on divergence."""

    def __init__(self, shape, lr, max_halvings=MAX_HALVINGS):
        super().__init__(shape, lr)
        self.max_halvings = max_halvings
        self.halvings = 0
        self._last = None

    def advance(self, params, loss_and_grad, frozen=None):
        """Evaluate at ``params`` and take one step; returns (new_params, loss).

        When the loss at ``params`` is non-finite the optimizer retreats to its
        last finite iterate with half the step size.  If that iterate is not
        finite either (the objective changed since it was recorded), the step
        is skipped and ``(params, inf)`` returned.
        """
        loss, grad = loss_and_grad(params)
        if grad is None:
            if self._last is None:
                return params, np.inf
            self.halvings += 1
            if self.halvings > self.max_halvings:
                raise TrainingError("loss stayed non-finite after repeated step halving")
            params, self.m, self.v, self.t = self._last
            self.lr *= 0.5
            log.info("non-finite loss; step size halved to %g", self.lr)
            loss, grad = loss_and_grad(params)
            if grad is None:
                self._last = None
                return params, np.inf
        self._last = (params.copy(), self.m.copy(), self.v.copy(), self.t)
        new = self.step(params, grad, frozen)
        return new, loss


# -- adaptation -------------------------------------------------------------

class _StopAfterPlateau:
    """Stop when the loss decreased by less than ``rtol`` (relative) over ``window`` steps."""

    def __init__(self, window=50, rtol=1e-8):
        self.window = window
        self.rtol = rtol
        self.history = []

    def __call__(self, loss):
        self.history.append(loss)
        if len(self.history) > self.window:
            old = self.history[-self.window - 1]
            return old - loss <= self.rtol * abs(old)
        return False


def adapt(model: SpremeModel, adaptation, seed=0, hyper: Hyperparams | None = None,
          mask=None) -> np.ndarray:
    """Fit coefficients for a new environment under the model's frozen mask.

    Masked-in entries start from Normal(0, adapt_init_var); the Huber
    coefficient loss over the whole adaptation data is then minimized.
    """
    hyper = hyper or model.hyper
    lib = model.lib
    mask = model.mask if mask is None else np.asarray(mask)
    trajs = [adaptation] if isinstance(adaptation, Trajectory) else list(adaptation)
    if any(tr.n != lib.n for tr in trajs):
        raise InvalidArgumentError("adaptation trajectory dimension does not match the model")
    rng = substream(seed, "adaptation")
    init = np.where(mask == 1, rng.normal(0.0, math.sqrt(hyper.adapt_init_var), mask.shape), 0.0)
    if not mask.any():
        warnings.warn("mask is empty; adaptation loss is constant", ConstantLossWarning,
                      stacklevel=2)
        return init
    obj = Objective(lib, [trajs], hyper, use_split=False)
    n_scored = obj.coeff_rollout.batch.n_scored
    free = mask.astype(bool)
    stop = _StopAfterPlateau()

    def fg(c):
        loss, g = obj.coefficient_loss_and_grad(c[None], mask)
        return loss, (None if g is None else g[0])

    loss0, g0 = fg(init)
    if g0 is None:
        raise AdaptationError("adaptation loss is non-finite at the initial coefficients")

    if hyper.adapt_optimizer == "adam":
        return _adapt_adam(fg, init, hyper, free, stop)
    if hyper.adapt_optimizer == "lm":
        out, loss = _lm_coefficients(obj.coeff_rollout, init[None], mask, hyper.adapt_max_steps,
                                     hyper.huber_delta)
        if not np.isfinite(loss):
            raise AdaptationError("adaptation diverged")
        return out[0]

    def callback(intermediate_result):
        if stop(float(intermediate_result.fun)):
            raise StopIteration

    norm = 1.0 / n_scored

    def fg_norm(c):
        loss, g = fg(c)
        return (np.inf, None) if g is None else (loss * norm, g * norm)

    out, loss = _lbfgs(fg_norm, init, free, feature_scales(lib, [trajs])[0], hyper.adapt_max_steps,
                       callback)
    if not np.isfinite(loss):
        raise AdaptationError("adaptation diverged")
    return out


def _adapt_adam(fg, init, hyper, free, stop):
    opt = GuardedAdam(init.shape, hyper.alpha_xi)
    c = init
    try:
        for _ in range(hyper.adapt_max_steps):
            c, loss = opt.advance(c, fg, frozen=~free)
            if stop(loss):
                break
    except TrainingError as err:
        raise AdaptationError(str(err)) from err
    return c


# -- serialization ----------------------------------------------------------

def _encode_matrix(a):
    return [[None if np.isneginf(v) else float(v) for v in row] for row in np.asarray(a)]


def _decode_matrix(rows):
    return np.array([[-np.inf if v is None else float(v) for v in row] for row in rows])


def model_to_dict(model: SpremeModel) -> dict:
    return {
        "method": model.method,
        "library": model.lib.descriptor(),
        "relaxed_mask": _encode_matrix(model.relaxed),
        "mask": model.mask.tolist(),
        "env_ids": [int(e) for e in model.env_ids],
        "coefficients": {str(int(e)): _encode_matrix(model.coeffs[i])
                         for i, e in enumerate(model.env_ids)},
        "hyperparams": model.hyper.to_dict(),
        "best_iter": int(model.best_iter),
        "train_report": [{k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                          for k, v in row.items()} for row in model.train_report],
    }


def model_from_dict(d: dict) -> SpremeModel:
    lib = FeatureLibrary.from_descriptor(d["library"])
    relaxed = _decode_matrix(d["relaxed_mask"])
    if not np.array_equal(quantize_mask(relaxed), np.array(d["mask"])):
        raise InvalidArgumentError("stored binary mask disagrees with the relaxed mask")
    env_ids = [int(e) for e in d["env_ids"]]
    coeffs = np.stack([_decode_matrix(d["coefficients"][str(e)]) for e in env_ids]) \
        if env_ids else np.zeros((0, lib.n, lib.p))
    return SpremeModel(lib, relaxed, coeffs, env_ids, Hyperparams.from_dict(d["hyperparams"]),
                       [{k: (math.inf if v is None else v) for k, v in row.items()}
                        for row in d.get("train_report", [])], d.get("method", "spreme"),
                       int(d.get("best_iter", 0)))
