"""Fixed-step RK4 and an adaptive reference solver.

Right-hand sides follow the ``f(x, t) -> dx/dt`` convention; ``x`` may carry
leading batch axes as long as ``f`` broadcasts over them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, InvalidArgumentError

RhsFunction = Callable[[np.ndarray, float], np.ndarray]

REFERENCE_RTOL = 1e-9
REFERENCE_ATOL = 1e-10


class StepCounter:
    """Counts RK4 steps (one per state advanced by one step)."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)

    def reset(self):
        self.count = 0


#: Global instrumentation hook; read by the horizon sweep.
rk4_steps = StepCounter()


def grid_length(t_start, t_end, dt):
    """Number of grid points ``round((t_end - t_start) / dt) + 1``."""
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    if t_end <= t_start:
        raise InvalidArgumentError("t_end must exceed t_start")
    ratio = (t_end - t_start) / dt
    steps = round(ratio)
    if abs(ratio - steps) > 0.5 or steps < 1:
        raise InvalidArgumentError(f"span {t_end - t_start} is not a multiple of dt={dt}")
    return steps + 1


def rk4_step(rhs: RhsFunction, state, t: float, dt: float) -> np.ndarray:
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    x = np.asarray(state, dtype=float)
    with np.errstate(all="ignore"):
        k1 = rhs(x, t)
        k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(x + dt * k3, t + dt)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    rk4_steps.add(x.size // max(x.shape[-1], 1) if x.ndim else 1)
    if not (np.all(np.isfinite(k1)) and np.all(np.isfinite(k2)) and np.all(np.isfinite(k3))
            and np.all(np.isfinite(k4)) and np.all(np.isfinite(out))):
        raise IntegrationError("non-finite value in RK4 step", time=t)
    return out


@dataclass(frozen=True)
class SolveRequest:
    x0: np.ndarray
    rhs: RhsFunction
    t_start: float
    t_end: float
    dt: float
    substeps: int = 1

    def __post_init__(self):
        grid_length(self.t_start, self.t_end, self.dt)
        if self.substeps < 1:
            raise InvalidArgumentError("substeps must be >= 1")


def ode_solve(req: SolveRequest) -> np.ndarray:
    """States at every grid point of ``[t_start, t_end]``, row 0 being ``x0``."""
    m = grid_length(req.t_start, req.t_end, req.dt)
    x = np.asarray(req.x0, dtype=float)
    out = np.empty((m,) + x.shape)
    out[0] = x
    h = req.dt / req.substeps
    for i in range(1, m):
        t = req.t_start + (i - 1) * req.dt
        for j in range(req.substeps):
            try:
                x = rk4_step(req.rhs, x, t + j * h, h)
            except IntegrationError as err:
                raise IntegrationError(f"RK4 diverged at step {i}", time=t, step=i) from err
        out[i] = x
    return out


def reference_solve(rhs: RhsFunction, x0, grid) -> np.ndarray:
    """Adaptive Dormand-Prince 5(4) solution sampled on ``grid``.

    Uses ``rtol=1e-9`` and ``atol=1e-10`` with dense output onto the grid.
    """
    grid = np.asarray(grid, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidArgumentError("grid must be a non-empty 1-D array")
    if grid.size == 1:
        return x0[None, :].copy()
    if np.any(np.diff(grid) <= 0):
        raise InvalidArgumentError("grid must be strictly increasing")

    def fun(t, y):
        return rhs(y, t)

    with np.errstate(all="ignore"):
        sol = solve_ivp(fun, (grid[0], grid[-1]), x0, method="RK45", t_eval=grid,
                        rtol=REFERENCE_RTOL, atol=REFERENCE_ATOL)
    if sol.status != 0 or sol.y.shape[1] != grid.size:
        last = float(sol.t[-1]) if sol.t.size else float(grid[0])
        raise IntegrationError(f"reference solver failed: {sol.message}", time=last)
    states = sol.y.T
    if not np.all(np.isfinite(states)):
        bad = int(np.argmax(~np.all(np.isfinite(states), axis=1)))
        raise IntegrationError("reference solver produced non-finite states",
                               time=float(grid[max(bad - 1, 0)]), step=bad)
    states[0] = x0
    return states
