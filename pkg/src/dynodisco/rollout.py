"""Batched RK4 rollouts of the linear-in-features model and their exact gradients.

Every trajectory is cut into segments: a segment starts at an observed anchor
state and is integrated forward for up to ``eta`` grid intervals, each interval
being compared with the observation at that index.  All segments of all
environments are advanced together; segment ``s`` uses the weight matrix
``W[env_index[s]]`` (shape n x p), so the right-hand side is
``f(x) = W Φ(x)``.

The reverse pass walks the unrolled RK4 stages backwards and accumulates
``dL/dW`` for each environment (discretize-then-differentiate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .integrators import rk4_steps
from .library import FeatureLibrary

ANCHOR_RULES = ("floor", "ceil")


def eta_anchor(i, eta):
    """Most recent multiple of ``eta`` not exceeding ``i``."""
    if i < 0 or eta < 1:
        raise InvalidArgumentError("need i >= 0 and eta >= 1")
    return eta * (i // eta)


def huber(r, delta=1.0):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_grad(r, delta=1.0):
    return np.clip(r, -delta, delta)


@dataclass
class SegmentBatch:
    anchors: np.ndarray      # (S, n)
    targets: np.ndarray      # (S, L, n)
    active: np.ndarray       # (S, L) integrate this interval
    scored: np.ndarray       # (S, L) include this interval in the loss
    dt: np.ndarray           # (S,)
    env_index: np.ndarray    # (S,)
    target_index: np.ndarray  # (S, L) grid index of each target, -1 if inactive
    traj_index: np.ndarray   # (S,)

    @property
    def size(self):
        return self.anchors.shape[0]

    @property
    def n_scored(self):
        return int(self.scored.sum())


def build_segments(series, eta, anchor_rule="floor") -> SegmentBatch:
    """Cut observed series into eta-step prediction segments.

    ``series`` is a list of ``(env_index, states, dt)``.  Targets are grid
    indices 1..m-1; target ``j`` is predicted from the anchor
    ``eta * floor((j - 1) / eta)``.  The ``"ceil"`` rule keeps the same
    anchors but scores only targets ``j >= eta``.
    """
    if eta < 1:
        raise InvalidArgumentError("eta must be >= 1")
    if anchor_rule not in ANCHOR_RULES:
        raise InvalidArgumentError(f"anchor_rule must be one of {ANCHOR_RULES}")
    if not series:
        raise InvalidArgumentError("no series given")
    n = np.asarray(series[0][1]).shape[1]
    L = max(1, min(eta, max(np.asarray(s).shape[0] - 1 for _, s, _ in series)))
    anchors, targets, active, scored, dts, envs, tidx, trajs = [], [], [], [], [], [], [], []
    for t_i, (env, states, dt) in enumerate(series):
        states = np.asarray(states, dtype=float)
        m = states.shape[0]
        for a in range(0, max(m - 1, 1), eta):
            tg = np.zeros((L, n))
            act = np.zeros(L, dtype=bool)
            idx = np.full(L, -1)
            for k in range(L):
                j = a + k + 1
                if j <= m - 1 and k < eta:
                    tg[k] = states[j]
                    act[k] = True
                    idx[k] = j
            sc = act & (idx >= eta) if anchor_rule == "ceil" else act.copy()
            anchors.append(states[a])
            targets.append(tg)
            active.append(act)
            scored.append(sc)
            dts.append(float(dt))
            envs.append(int(env))
            tidx.append(idx)
            trajs.append(t_i)
    return SegmentBatch(np.array(anchors), np.array(targets), np.array(active), np.array(scored),
                        np.array(dts), np.array(envs, dtype=int), np.array(tidx),
                        np.array(trajs, dtype=int))


class Rollout:
    """Forward/backward RK4 rollouts over a fixed segment batch."""

    def __init__(self, lib: FeatureLibrary, batch: SegmentBatch, n_env, substeps=1):
        if substeps < 1:
            raise InvalidArgumentError("substeps must be >= 1")
        self.lib = lib
        self.batch = batch
        self.n_env = int(n_env)
        self.substeps = int(substeps)

    def _check(self, W):
        W = np.asarray(W, dtype=float)
        if W.shape != (self.n_env, self.lib.n, self.lib.p):
            raise InvalidArgumentError(
                f"weights must have shape {(self.n_env, self.lib.n, self.lib.p)}, got {W.shape}")
        return W

    def forward(self, W, keep_stages=False):
        """Integrate all segments; returns predictions (S, L, n) and optional stage features."""
        W = self._check(W)
        b = self.batch
        lib = self.lib
        Wg = W[b.env_index]  # (S, n, p)
        q = self.substeps
        x = b.anchors.copy()
        S, L = b.active.shape
        preds = np.zeros((S, L, x.shape[1]))
        stages = [] if keep_stages else None

        def f(y):
            if keep_stages:
                phi, jac = lib.evaluate_with_jacobian(y)
                cache.append((phi, jac))
            else:
                phi = lib.evaluate(y)
            return np.einsum("sp,snp->sn", phi, Wg)

        cache = []

        with np.errstate(all="ignore"):
            for k in range(L):
                h = np.where(b.active[:, k], b.dt / q, 0.0)[:, None]
                rk4_steps.add(q * int(b.active[:, k].sum()))
                for _ in range(q):
                    y1 = x
                    k1 = f(y1)
                    y2 = x + 0.5 * h * k1
                    k2 = f(y2)
                    y3 = x + 0.5 * h * k2
                    k3 = f(y3)
                    y4 = x + h * k3
                    k4 = f(y4)
                    if keep_stages:
                        stages.append((h, cache[-4:]))
                    x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                preds[:, k] = x
        return preds, stages

    def forward_sensitivity(self, W):
        """Predictions (S, L, n) and their derivatives w.r.t. ``W[env]``, shape (S, L, n, n, p).

        Forward-mode through the same RK4 stages as ``forward``: the state
        sensitivity ``Y = dx/dW`` obeys ``dk = A Y + e_a φ_b`` at each stage,
        with ``A = W ∂Φ/∂x``.
        """
        W = self._check(W)
        b = self.batch
        lib = self.lib
        Wg = W[b.env_index]
        q = self.substeps
        n, p = lib.n, lib.p
        x = b.anchors.copy()
        S, L = b.active.shape
        Y = np.zeros((S, n, n, p))
        preds = np.zeros((S, L, n))
        sens = np.zeros((S, L, n, n, p))
        eye = np.eye(n)[None, :, :, None]

        def f(y, dy):
            phi, jac = lib.evaluate_with_jacobian(y)
            k = np.einsum("sp,snp->sn", phi, Wg)
            A = np.einsum("snp,spc->snc", Wg, jac)
            dk = np.einsum("snc,scab->snab", A, dy) + eye * phi[:, None, None, :]
            return k, dk

        with np.errstate(all="ignore"):
            for k in range(L):
                h = np.where(b.active[:, k], b.dt / q, 0.0)[:, None]
                hh = h[:, :, None, None]
                rk4_steps.add(q * int(b.active[:, k].sum()))
                for _ in range(q):
                    k1, d1 = f(x, Y)
                    k2, d2 = f(x + 0.5 * h * k1, Y + 0.5 * hh * d1)
                    k3, d3 = f(x + 0.5 * h * k2, Y + 0.5 * hh * d2)
                    k4, d4 = f(x + h * k3, Y + hh * d3)
                    x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                    Y = Y + (hh / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
                preds[:, k] = x
                sens[:, k] = Y
        return preds, sens

    def per_env_loss(self, W, kind="huber", delta=1.0):
        """Loss split by environment (E,); environments with non-finite rollouts get inf."""
        b = self.batch
        preds, _ = self.forward(W)
        with np.errstate(all="ignore"):
            r = np.where(b.scored[:, :, None], preds - b.targets, 0.0)
            per_seg = (huber(r, delta) if kind == "huber" else r * r).sum(axis=(1, 2))
        out = np.zeros(self.n_env)
        np.add.at(out, b.env_index, per_seg)
        out[~np.isfinite(out)] = np.inf
        return out

    def predictions_finite(self, preds):
        return bool(np.all(np.isfinite(preds[self.batch.active])))

    def loss(self, W, kind="huber", delta=1.0):
        preds, _ = self.forward(W)
        return self._loss_from_preds(preds, kind, delta)

    def _loss_from_preds(self, preds, kind, delta):
        b = self.batch
        if not self.predictions_finite(preds):
            return np.inf
        r = (preds - b.targets)[b.scored]
        if kind == "huber":
            val = huber(r, delta).sum()
        elif kind == "sq":
            val = (r * r).sum()
        else:
            raise InvalidArgumentError(f"unknown loss kind {kind!r}")
        return float(val) if np.isfinite(val) else np.inf

    def loss_and_grad(self, W, kind="huber", delta=1.0):
        """Loss summed over scored targets and its gradient w.r.t. ``W`` (E, n, p).

        Returns ``(inf, None)`` when the rollout leaves the finite range.
        """
        W = self._check(W)
        b = self.batch
        preds, stages = self.forward(W, keep_stages=True)
        loss = self._loss_from_preds(preds, kind, delta)
        if not np.isfinite(loss):
            return np.inf, None
        r = preds - b.targets
        if kind == "huber":
            dpred = huber_grad(r, delta)
        else:
            dpred = 2.0 * r
        dpred = np.where(b.scored[:, :, None], dpred, 0.0)

        Wg = W[b.env_index]
        gWs = np.zeros_like(Wg)
        a = np.zeros_like(b.anchors)
        q = self.substeps
        S, L = b.active.shape

        def vjp(pj, g):
            # returns (J^T g, Φ(y)) for the cached stage features
            phi, jac = pj
            u = np.einsum("sn,snp->sp", g, Wg)
            return np.einsum("sp,spn->sn", u, jac), phi

        with np.errstate(all="ignore"):
            si = len(stages)
            for k in range(L - 1, -1, -1):
                a = a + dpred[:, k]
                for _ in range(q):
                    si -= 1
                    h, (y1, y2, y3, y4) = stages[si]
                    dk1 = (h / 6.0) * a
                    dk2 = (h / 3.0) * a
                    dk3 = (h / 3.0) * a
                    dk4 = (h / 6.0) * a
                    ax = a
                    ay, phi = vjp(y4, dk4)
                    gWs += dk4[:, :, None] * phi[:, None, :]
                    ax = ax + ay
                    dk3 = dk3 + h * ay
                    ay, phi = vjp(y3, dk3)
                    gWs += dk3[:, :, None] * phi[:, None, :]
                    ax = ax + ay
                    dk2 = dk2 + 0.5 * h * ay
                    ay, phi = vjp(y2, dk2)
                    gWs += dk2[:, :, None] * phi[:, None, :]
                    ax = ax + ay
                    dk1 = dk1 + 0.5 * h * ay
                    ay, phi = vjp(y1, dk1)
                    gWs += dk1[:, :, None] * phi[:, None, :]
                    a = ax + ay
        grad = np.zeros_like(W)
        np.add.at(grad, b.env_index, gWs)
        if not np.all(np.isfinite(grad)):
            return np.inf, None
        return loss, grad
