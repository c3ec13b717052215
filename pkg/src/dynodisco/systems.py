"""Benchmark ODE systems, environment sampling and dataset generation."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import IntegrationError, InvalidArgumentError
from .integrators import reference_solve
from .library import FeatureLibrary, Monomial, Trig, build_library


class SystemKind(str, enum.Enum):
    LINEAR3D = "linear"
    LORENZ = "lorenz"
    LOTKA_VOLTERRA = "lotka-volterra"
    DAMPED_PENDULUM = "damped-pendulum"

    @classmethod
    def parse(cls, name) -> "SystemKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"linear3d": "linear", "lv": "lotka-volterra", "lotkavolterra": "lotka-volterra",
                   "dp": "damped-pendulum", "pendulum": "damped-pendulum",
                   "dampedpendulum": "damped-pendulum"}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise InvalidArgumentError(f"unknown system {name!r}; expected one of "
                                   f"{[k.value for k in cls]}")

    @property
    def dim(self):
        return 3 if self in (SystemKind.LINEAR3D, SystemKind.LORENZ) else 2


PARAM_NAMES = {
    SystemKind.LINEAR3D: ("alpha", "beta", "gamma", "delta", "omega"),
    SystemKind.LORENZ: ("sigma", "rho", "beta"),
    SystemKind.LOTKA_VOLTERRA: ("alpha", "beta", "gamma", "delta"),
    SystemKind.DAMPED_PENDULUM: ("alpha", "omega0"),
}

# Means in PARAM_NAMES order.  Lorenz: sigma=10, rho=28, beta=8/3.
PARAM_MEANS = {
    SystemKind.LINEAR3D: (-0.1, 2.0, -2.0, -0.1, -0.3),
    SystemKind.LORENZ: (10.0, 28.0, 8.0 / 3.0),
    SystemKind.DAMPED_PENDULUM: (0.5, 0.98),
    SystemKind.LOTKA_VOLTERRA: (0.5, 0.75, 0.5, 0.75),
}

# Largest RK4 step used when fitting models to each system.  Lorenz evolves on
# a much faster time scale than the others and needs a finer step.
DEFAULT_MAX_STEP = {
    SystemKind.LINEAR3D: 0.05,
    SystemKind.LORENZ: 0.0125,
    SystemKind.DAMPED_PENDULUM: 0.05,
    SystemKind.LOTKA_VOLTERRA: 0.05,
}

PARAM_VARIANCE = {
    SystemKind.LINEAR3D: 0.01,
    SystemKind.LORENZ: 0.02,
    SystemKind.DAMPED_PENDULUM: 0.01,
    SystemKind.LOTKA_VOLTERRA: 0.0,
}

LV_GRID_VALUES = (0.5, 0.75, 1.0)
LV_HELDOUT_RANGE = (0.5, 1.0)
PENDULUM_THETA_EXCLUSION = 0.1


@dataclass(frozen=True)
class SystemParams:
    kind: SystemKind
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", SystemKind.parse(self.kind))
        vals = tuple(float(v) for v in self.values)
        if len(vals) != len(PARAM_NAMES[self.kind]):
            raise InvalidArgumentError(
                f"{self.kind.value} takes {len(PARAM_NAMES[self.kind])} parameters, got {len(vals)}")
        object.__setattr__(self, "values", vals)

    def as_dict(self):
        return dict(zip(PARAM_NAMES[self.kind], self.values))

    def __getitem__(self, name):
        return self.as_dict()[name]


def eval_true_rhs(kind, params: SystemParams, state) -> np.ndarray:
    """Ground-truth dx/dt; ``state`` may carry leading batch axes."""
    kind = SystemKind.parse(kind)
    x = np.asarray(state, dtype=float)
    if x.shape[-1] != kind.dim:
        raise InvalidArgumentError(f"{kind.value} state has dimension {kind.dim}, got {x.shape[-1]}")
    v = params.values
    if kind is SystemKind.LINEAR3D:
        a, b, g, d, w = v
        out = [a * x[..., 0] + b * x[..., 1], g * x[..., 0] + d * x[..., 1], w * x[..., 2]]
    elif kind is SystemKind.LORENZ:
        s, r, b = v
        out = [s * (x[..., 1] - x[..., 0]), x[..., 0] * (r - x[..., 2]) - x[..., 1],
               x[..., 0] * x[..., 1] - b * x[..., 2]]
    elif kind is SystemKind.LOTKA_VOLTERRA:
        a, b, g, d = v
        u, w = x[..., 0], x[..., 1]
        out = [a * u - b * u * w, d * u * w - g * w]
    else:
        a, w0 = v
        out = [x[..., 1], -a * x[..., 1] - w0 ** 2 * np.sin(x[..., 0])]
    return np.stack(out, axis=-1)


def default_library(kind, degree=5) -> FeatureLibrary:
    kind = SystemKind.parse(kind)
    return build_library(kind.dim, degree, include_trig=kind is SystemKind.DAMPED_PENDULUM)


def true_coefficients(kind, params: SystemParams, lib: FeatureLibrary) -> np.ndarray:
    """Coefficient matrix (n x p) that reproduces ``eval_true_rhs`` exactly in ``lib``."""
    kind = SystemKind.parse(kind)
    n = kind.dim
    xi = np.zeros((n, lib.p))

    def mono(*e):
        return lib.index_of(Monomial(tuple(e)))

    v = params.values
    if kind is SystemKind.LINEAR3D:
        a, b, g, d, w = v
        xi[0, mono(1, 0, 0)], xi[0, mono(0, 1, 0)] = a, b
        xi[1, mono(1, 0, 0)], xi[1, mono(0, 1, 0)] = g, d
        xi[2, mono(0, 0, 1)] = w
    elif kind is SystemKind.LORENZ:
        s, r, b = v
        xi[0, mono(1, 0, 0)], xi[0, mono(0, 1, 0)] = -s, s
        xi[1, mono(1, 0, 0)], xi[1, mono(0, 1, 0)], xi[1, mono(1, 0, 1)] = r, -1.0, -1.0
        xi[2, mono(1, 1, 0)], xi[2, mono(0, 0, 1)] = 1.0, -b
    elif kind is SystemKind.LOTKA_VOLTERRA:
        a, b, g, d = v
        xi[0, mono(1, 0)], xi[0, mono(1, 1)] = a, -b
        xi[1, mono(1, 1)], xi[1, mono(0, 1)] = d, -g
    else:
        a, w0 = v
        if not lib.include_trig:
            raise InvalidArgumentError("damped pendulum needs a library with trig terms")
        xi[0, mono(0, 1)] = 1.0
        xi[1, mono(0, 1)] = -a
        xi[1, lib.index_of(Trig("sin(x1)"))] = -w0 ** 2
    return xi


def true_support(kind, lib: FeatureLibrary) -> np.ndarray:
    """Binary (n x p) support of the ground-truth equations."""
    kind = SystemKind.parse(kind)
    ones = SystemParams(kind, (1.0,) * len(PARAM_NAMES[kind]))
    return (true_coefficients(kind, ones, lib) != 0).astype(int)


# -- random streams -------------------------------------------------------

def substream(seed, *names) -> np.random.Generator:
    """Independent generator for a named substream of a root seed."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng([int(seed)] + keys)


def lotka_volterra_grid():
    a = g = 0.5
    return [SystemParams(SystemKind.LOTKA_VOLTERRA, (a, b, g, d))
            for b in LV_GRID_VALUES for d in LV_GRID_VALUES]


def sample_params(kind, mean, variance, rng: np.random.Generator) -> SystemParams:
    """Draw one environment.

    Each parameter is Normal(mean_i, variance) independently.  Lotka-Volterra
    ignores ``mean``/``variance`` and draws beta, delta uniformly over the
    range spanned by the training grid (alpha = gamma = 0.5).
    """
    kind = SystemKind.parse(kind)
    if variance < 0:
        raise InvalidArgumentError(f"variance must be >= 0, got {variance}")
    if kind is SystemKind.LOTKA_VOLTERRA:
        lo, hi = LV_HELDOUT_RANGE
        b, d = rng.uniform(lo, hi, size=2)
        return SystemParams(kind, (0.5, b, 0.5, d))
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (len(PARAM_NAMES[kind]),):
        raise InvalidArgumentError(f"{kind.value} expects {len(PARAM_NAMES[kind])} means")
    std = np.sqrt(variance)
    for _ in range(1000):
        vals = mean + std * rng.standard_normal(mean.size)
        if kind is not SystemKind.LORENZ or np.all(vals > 0):
            return SystemParams(kind, tuple(vals))
    raise InvalidArgumentError("could not draw positive Lorenz parameters")


def sample_initial_state(kind, rng: np.random.Generator) -> np.ndarray:
    kind = SystemKind.parse(kind)
    if kind in (SystemKind.LINEAR3D, SystemKind.LORENZ):
        return rng.standard_normal(3)
    if kind is SystemKind.LOTKA_VOLTERRA:
        out = np.empty(2)
        for i in range(2):
            v = 1.0 + rng.standard_normal()
            while v <= 0:
                v = 1.0 + rng.standard_normal()
            out[i] = v
        return out
    while True:
        theta = rng.uniform(-np.pi / 2, np.pi / 2)
        if abs(theta) >= PENDULUM_THETA_EXCLUSION:
            return np.array([theta, 0.0])


# -- trajectories -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    env_id: int
    times: np.ndarray
    states: np.ndarray
    params: SystemParams | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise InvalidArgumentError("a trajectory needs at least two time points")
        if states.shape[0] != times.size:
            raise InvalidArgumentError("states and times disagree in length")
        if not np.all(np.isfinite(states)):
            raise InvalidArgumentError("trajectory states must be finite")
        steps = np.diff(times)
        if steps[0] <= 0 or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12 * abs(times).max()):
            raise InvalidArgumentError("trajectory times must be uniformly spaced and increasing")
        times.setflags(write=False)
        states.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def dt(self):
        return float((self.times[-1] - self.times[0]) / (self.times.size - 1))

    @property
    def m(self):
        return self.times.size

    @property
    def n(self):
        return self.states.shape[1]


def generate_trajectory(kind, params: SystemParams, x0, horizon, dt, env_id=0) -> Trajectory:
    kind = SystemKind.parse(kind)
    if horizon <= 0 or dt <= 0:
        raise InvalidArgumentError("horizon and dt must be positive")
    ratio = horizon / dt
    if abs(ratio - round(ratio)) > 0.5:
        raise InvalidArgumentError("horizon must be a multiple of dt")
    m = round(ratio) + 1
    times = np.arange(m) * dt
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (kind.dim,):
        raise InvalidArgumentError(f"initial state must have dimension {kind.dim}")

    def rhs(x, t):
        return eval_true_rhs(kind, params, x)

    states = reference_solve(rhs, x0, times)
    return Trajectory(env_id, times, states, params)


# -- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    horizon: float
    dt: float
    n_traj: int


@dataclass(frozen=True)
class DatasetSpec:
    kind: SystemKind
    train: SplitSpec
    adaptation: SplitSpec
    test: SplitSpec
    n_train_envs: int = 9
    n_heldout_envs: int = 1
    variance: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SystemKind.parse(self.kind))

    @property
    def param_variance(self):
        return PARAM_VARIANCE[self.kind] if self.variance is None else self.variance

    def as_dict(self):
        return {
            "kind": self.kind.value,
            "train": vars(self.train).copy(),
            "adaptation": vars(self.adaptation).copy(),
            "test": vars(self.test).copy(),
            "n_train_envs": self.n_train_envs,
            "n_heldout_envs": self.n_heldout_envs,
            "variance": self.param_variance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(kind=SystemKind.parse(d["kind"]), train=SplitSpec(**d["train"]),
                   adaptation=SplitSpec(**d["adaptation"]), test=SplitSpec(**d["test"]),
                   n_train_envs=int(d["n_train_envs"]), n_heldout_envs=int(d["n_heldout_envs"]),
                   variance=d.get("variance"))

    def with_overrides(self, **kw):
        return replace(self, **kw)


BENCHMARK_SPECS = {
    SystemKind.LINEAR3D: DatasetSpec(SystemKind.LINEAR3D, SplitSpec(4.0, 0.05, 8),
                                     SplitSpec(4.0, 0.05, 1), SplitSpec(10.0, 0.025, 16)),
    SystemKind.LORENZ: DatasetSpec(SystemKind.LORENZ, SplitSpec(4.0, 0.05, 12),
                                   SplitSpec(4.0, 0.05, 1), SplitSpec(10.0, 0.025, 16)),
    SystemKind.LOTKA_VOLTERRA: DatasetSpec(SystemKind.LOTKA_VOLTERRA, SplitSpec(10.0, 0.30, 4),
                                           SplitSpec(10.0, 0.30, 1), SplitSpec(25.0, 0.15, 32)),
    SystemKind.DAMPED_PENDULUM: DatasetSpec(SystemKind.DAMPED_PENDULUM, SplitSpec(4.0, 0.20, 8),
                                            SplitSpec(4.0, 0.20, 1), SplitSpec(10.0, 0.10, 32)),
}


@dataclass(frozen=True)
class Dataset:
    kind: SystemKind
    spec: DatasetSpec | None
    seed: int | None
    train: dict = field(default_factory=dict)        # env_id -> list[Trajectory]
    adaptation: dict = field(default_factory=dict)   # heldout env_id -> list[Trajectory]
    test: dict = field(default_factory=dict)         # heldout env_id -> list[Trajectory]
    env_params: dict = field(default_factory=dict)   # env_id -> SystemParams

    @property
    def train_env_ids(self):
        return sorted(self.train)

    @property
    def heldout_env_ids(self):
        return sorted(self.adaptation)

    @property
    def n(self):
        return self.kind.dim


def _sample_envs(spec: DatasetSpec, seed):
    kind = spec.kind
    mean = PARAM_MEANS[kind]
    var = spec.param_variance
    if kind is SystemKind.LOTKA_VOLTERRA:
        grid = lotka_volterra_grid()
        train = [grid[i % len(grid)] for i in range(spec.n_train_envs)]
    else:
        rng = substream(seed, "dataset", "train-envs")
        train = [sample_params(kind, mean, var, rng) for _ in range(spec.n_train_envs)]
    rng = substream(seed, "dataset", "heldout-envs")
    held = [sample_params(kind, mean, var, rng) for _ in range(spec.n_heldout_envs)]
    return train, held


def _generate_split(kind, params, split: SplitSpec, env_id, rng):
    out = []
    for _ in range(split.n_traj):
        for _attempt in range(100):
            x0 = sample_initial_state(kind, rng)
            try:
                out.append(generate_trajectory(kind, params, x0, split.horizon, split.dt, env_id))
                break
            except IntegrationError:
                continue
        else:
            raise IntegrationError(f"could not generate a finite trajectory for env {env_id}")
    return out


def build_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    kind = spec.kind
    train_params, held_params = _sample_envs(spec, seed)
    env_params, train, adapt, test = {}, {}, {}, {}
    for e, params in enumerate(train_params):
        env_params[e] = params
        rng = substream(seed, "dataset", "train", e)
        train[e] = _generate_split(kind, params, spec.train, e, rng)
    for k, params in enumerate(held_params):
        e = spec.n_train_envs + k
        env_params[e] = params
        adapt[e] = _generate_split(kind, params, spec.adaptation, e,
                                   substream(seed, "dataset", "adaptation", e))
        test[e] = _generate_split(kind, params, spec.test, e, substream(seed, "dataset", "test", e))
    return Dataset(kind, spec, int(seed), train, adapt, test, env_params)


def build_benchmark_dataset(kind, seed, **overrides) -> Dataset:
    spec = BENCHMARK_SPECS[SystemKind.parse(kind)]
    if overrides:
        spec = spec.with_overrides(**overrides)
    return build_dataset(spec, seed)


def in_domain_test_trajectories(dataset: Dataset, env_id, n_traj=None, seed=None):
    """Test-resolution trajectories for a training environment (generated on demand)."""
    if dataset.spec is None or env_id not in dataset.env_params:
        raise InvalidArgumentError("in-domain test data needs generation metadata")
    split = dataset.spec.test
    if n_traj is not None:
        split = SplitSpec(split.horizon, split.dt, n_traj)
    seed = dataset.seed if seed is None else seed
    rng = substream(seed, "dataset", "in-domain-test", env_id)
    return _generate_split(dataset.kind, dataset.env_params[env_id], split, env_id, rng)
