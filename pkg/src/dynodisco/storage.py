"""On-disk formats: dataset trees of CSV files with a JSON manifest, and model JSON."""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .core import SpremeModel, model_from_dict, model_to_dict
from .errors import CompatibilityError, InvalidArgumentError
from .library import FeatureLibrary
from .systems import Dataset, DatasetSpec, SystemKind, SystemParams, Trajectory, true_support

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
SPLITS = ("train", "adaptation", "test")


def _num(v):
    return f"{float(v):.17g}"


def write_trajectory_csv(path, tr: Trajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x{i}" for i in range(tr.n)])
        for t, x in zip(tr.times, tr.states):
            w.writerow([_num(t)] + [_num(v) for v in x])


def read_trajectory_csv(path, env_id, params=None) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise InvalidArgumentError(f"{path}: missing 't,x0,...' header")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return Trajectory(env_id, data[:, 0], data[:, 1:], params)


def _traj_path(root, split, env_id, k):
    return os.path.join(root, split, f"env{env_id:02d}", f"traj{k:02d}.csv")


def save_dataset(dataset: Dataset, root, lib: FeatureLibrary | None = None, extra=None):
    """Write every split and a manifest; returns the manifest dict."""
    files = {}
    for split in SPLITS:
        by_env = getattr(dataset, split)
        files[split] = {}
        for env_id in sorted(by_env):
            os.makedirs(os.path.join(root, split, f"env{env_id:02d}"), exist_ok=True)
            for k, tr in enumerate(by_env[env_id]):
                write_trajectory_csv(_traj_path(root, split, env_id, k), tr)
            files[split][str(env_id)] = len(by_env[env_id])
    manifest = {
        "format": FORMAT_VERSION,
        "system": dataset.kind.value,
        "seed": dataset.seed,
        "spec": dataset.spec.as_dict() if dataset.spec is not None else None,
        "env_params": {str(e): list(p.values) for e, p in sorted(dataset.env_params.items())},
        "train_env_ids": dataset.train_env_ids,
        "heldout_env_ids": dataset.heldout_env_ids,
        "files": files,
    }
    if lib is not None:
        manifest["truth"] = {"library": lib.descriptor(),
                             "support": true_support(dataset.kind, lib).tolist()}
    if extra:
        manifest.update(extra)
    with open(os.path.join(root, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(root) -> dict:
    path = os.path.join(root, MANIFEST)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as err:
        raise InvalidArgumentError(f"no dataset manifest at {path}") from err
    if manifest.get("format") != FORMAT_VERSION:
        raise CompatibilityError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    return manifest


def load_dataset(root) -> Dataset:
    manifest = read_manifest(root)
    kind = SystemKind.parse(manifest["system"])
    params = {int(e): SystemParams(kind, v) for e, v in manifest["env_params"].items()}
    splits = {}
    for split in SPLITS:
        splits[split] = {}
        for env, count in manifest["files"][split].items():
            e = int(env)
            splits[split][e] = [read_trajectory_csv(_traj_path(root, split, e, k), e,
                                                    params.get(e)) for k in range(count)]
    spec = DatasetSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    return Dataset(kind, spec, manifest.get("seed"), splits["train"], splits["adaptation"],
                   splits["test"], params)


def manifest_truth(manifest, lib: FeatureLibrary):
    """Ground-truth support from the manifest when it was stored for this library."""
    truth = manifest.get("truth")
    if not truth or truth.get("library") != lib.descriptor():
        return None
    return np.array(truth["support"], dtype=int)


def save_model(model: SpremeModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def load_model(path) -> SpremeModel:
    try:
        with open(path) as fh:
            return model_from_dict(json.load(fh))
    except (KeyError, TypeError, json.JSONDecodeError) as err:
        raise InvalidArgumentError(f"{path}: malformed model file ({err})") from err


def check_compatible(model: SpremeModel, dataset: Dataset, manifest=None):
    truth = (manifest or {}).get("truth")
    if truth and truth.get("library") != model.lib.descriptor():
        raise CompatibilityError(
            f"model library {model.lib.descriptor()} differs from the dataset's "
            f"{truth.get('library')}")
    if model.lib.n != dataset.n:
        raise CompatibilityError(
            f"model state dimension {model.lib.n} does not match dataset dimension {dataset.n}")
    missing = [e for e in model.env_ids if e not in dataset.train]
    if missing:
        raise CompatibilityError(f"model environments {missing} are not in the dataset")
