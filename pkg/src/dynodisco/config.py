"""Run configuration: one strict JSON document, overridable from the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .baselines import METHODS
from .core import Hyperparams
from .errors import InvalidArgumentError
from .library import FeatureLibrary
from .systems import BENCHMARK_SPECS, DatasetSpec, SplitSpec, SystemKind, default_library


@dataclass(frozen=True)
class LibrarySpec:
    degree: int = 5
    include_trig: bool | None = None  # None: trig terms for the pendulum only

    def build(self, kind: SystemKind) -> FeatureLibrary:
        lib = default_library(kind, self.degree)
        if self.include_trig is None or self.include_trig == lib.include_trig:
            return lib
        return FeatureLibrary(lib.n, self.degree, bool(self.include_trig))


@dataclass(frozen=True)
class SweepSpec:
    variances: tuple = (0.01, 0.1, 0.5)
    etas: tuple = (1, 5, 10, 20)
    methods: tuple = ("spreme", "sindy-intersection")


@dataclass(frozen=True)
class RunConfig:
    system: str = "linear"
    method: str = "spreme"
    seed: int = 0
    out: str = "runs"
    dataset: dict = field(default_factory=dict)
    library: LibrarySpec = field(default_factory=LibrarySpec)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    record_runtime: bool = False

    def __post_init__(self):
        kind = SystemKind.parse(self.system)
        object.__setattr__(self, "system", kind.value)
        object.__setattr__(self, "hyper", self.hyper.for_system(kind))
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidArgumentError("seed must be a non-negative integer")
        self.dataset_spec()  # validates overrides early

    @property
    def kind(self) -> SystemKind:
        return SystemKind.parse(self.system)

    def dataset_spec(self) -> DatasetSpec:
        base = BENCHMARK_SPECS[self.kind]
        kw = {}
        for key, val in self.dataset.items():
            if key in ("train", "adaptation", "test"):
                if not isinstance(val, dict):
                    raise InvalidArgumentError(f"dataset.{key} must be an object")
                unknown = set(val) - {f.name for f in fields(SplitSpec)}
                if unknown:
                    raise InvalidArgumentError(f"unknown keys in dataset.{key}: {sorted(unknown)}")
                kw[key] = replace(getattr(base, key), **val)
            elif key in ("n_train_envs", "n_heldout_envs", "variance"):
                kw[key] = val
            else:
                raise InvalidArgumentError(f"unknown dataset key {key!r}")
        return base.with_overrides(**kw)

    def lib(self) -> FeatureLibrary:
        return self.library.build(self.kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"] = self.hyper.to_dict()
        d["sweep"] = {k: list(v) for k, v in asdict(self.sweep).items()}
        d["dataset"] = self.dataset_spec().as_dict()
        del d["dataset"]["kind"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidArgumentError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "library" in kw:
                kw["library"] = LibrarySpec(**kw["library"])
            if "hyper" in kw:
                hyper = dict(kw["hyper"])
                if "thresholds" in hyper:
                    hyper["thresholds"] = tuple(hyper["thresholds"])
                kw["hyper"] = Hyperparams.from_dict(hyper)
            if "sweep" in kw:
                kw["sweep"] = SweepSpec(**{k: tuple(v) for k, v in kw["sweep"].items()})
        except TypeError as err:
            raise InvalidArgumentError(f"bad config section: {err}") from err
        return cls(**kw)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def load_config(path=None, **overrides) -> RunConfig:
    """File values first, then non-None keyword overrides (the CLI flags)."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as err:
            raise InvalidArgumentError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(data, dict):
        raise InvalidArgumentError("config must be a JSON object")
    # merge before construction so per-system defaults follow an overridden system
    data = dict(data, **{k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
