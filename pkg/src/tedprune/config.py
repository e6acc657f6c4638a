"""Experiment configuration: YAML files, dotted overrides and dataset loading.

A config has one section per concern (``data``, ``model``, ``schedule``,
``scoring``, ``trainer``, ``seeds``, ``oracle``). Every field has a default,
so a file only needs to name what differs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .data import DataError, Dataset, gen_synthetic, load_csv, load_idx, split
from .model import ModelError, ModelSpec
from .oracle import FitProtocol
from .schedule import ScheduleError, ScheduleSpec
from .trainer import ConfigError, Seeds, TrainConfig

BUNDLED = ("blobs-small", "moons", "mnist-subset", "oracle-tiny")

DEFAULTS: dict = {
    "name": "unnamed",
    "data": {"source": "synthetic", "kind": "gaussian-blobs", "n": 2000, "noise": 0.6,
             "num_classes": 2, "dim": 2, "seed": 0, "test_fraction": 0.2, "split_seed": 0,
             "images": None, "labels": None, "path": None},
    "model": {"architecture": "mlp", "widths": [2, 16, 2], "loss": "", "activation": "tanh",
              "bias": True, "l2": 0.0},
    "schedule": {"kind": "rollercoaster", "prune_ratio": 0.5, "beta": 0.25, "anneal": 0.125},
    "scoring": {"mode": "ted", "alpha": 0.9, "reference": "batch", "refresh": False, "reverse": False},
    "trainer": {"epochs": 40, "batch_size": 32, "lr": 0.05, "momentum": 0.9, "correction": True,
                "track_pcc": False},
    "seeds": {"init": 0, "shuffle": 0, "scoring": 0},
    "oracle": {"tol": 1e-8, "max_iter": 50_000, "restarts": 5, "batch_size": 8, "eta": 0.1,
               "lam": 1e-4, "m": 2, "sample_id": 0, "steps": 200, "points": 21,
               "prune_fraction": 0.6, "workers": 1},
}


class IOFailure(OSError):
    """A required input file is missing or unreadable."""


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a section")
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = val
    return out


def resolve_path(name_or_path: str) -> Path | None:
    """A bundled config name maps to the packaged YAML; anything else is a path."""
    if name_or_path in BUNDLED:
        return None
    return Path(name_or_path)


def read_raw(name_or_path: str) -> dict:
    """Parse a config file (or bundled name) merged over the defaults."""
    path = resolve_path(name_or_path)
    try:
        if path is None:
            text = resources.files("tedprune").joinpath("configs", f"{name_or_path}.yaml").read_text()
        else:
            text = path.read_text()
    except FileNotFoundError:
        raise IOFailure(f"config not found: {name_or_path}") from None
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{name_or_path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{name_or_path}: top level must be a mapping")
    return _merge(DEFAULTS, raw)


def set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def parse_overrides(tokens: list[str]) -> list[tuple[str, object]]:
    """``['--trainer.lr', '0.1', ...]`` into (key, YAML-parsed value) pairs."""
    pairs = []
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"expected --key value, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
        else:
            try:
                text = next(it)
            except StopIteration:
                raise ConfigError(f"missing value for {tok}") from None
        try:
            pairs.append((key, yaml.safe_load(text)))
        except yaml.YAMLError:
            raise ConfigError(f"unparsable value for {key!r}: {text!r}") from None
    return pairs


def apply_overrides(raw: dict, pairs) -> dict:
    raw = copy.deepcopy(raw)
    for key, value in pairs:
        set_dotted(raw, key, value)
    return raw


@dataclass(frozen=True)
class Experiment:
    name: str
    raw: dict
    train: TrainConfig

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def oracle(self) -> dict:
        return self.raw["oracle"]

    def protocol(self) -> FitProtocol:
        o = self.oracle
        return FitProtocol(float(o["tol"]), int(o["max_iter"]), int(o["restarts"]), self.train.seeds.init)


def build(raw: dict) -> Experiment:
    """Validate a merged config dict into typed objects; raises ConfigError."""
    try:
        m = raw["model"]
        model = ModelSpec(m["architecture"], tuple(int(w) for w in m["widths"]), m["loss"] or "",
                          m["activation"], bool(m["bias"]), float(m["l2"]))
        model.validate()
        schedule = ScheduleSpec(**raw["schedule"])
        sc, tr = raw["scoring"], raw["trainer"]
        cfg = TrainConfig(
            model=model, schedule=schedule, mode=sc["mode"], epochs=int(tr["epochs"]),
            batch_size=int(tr["batch_size"]), lr=float(tr["lr"]), momentum=float(tr["momentum"]),
            seeds=Seeds(**{k: int(v) for k, v in raw["seeds"].items()}),
            correction=bool(tr["correction"]), refresh=bool(sc["refresh"]), alpha=float(sc["alpha"]),
            reference=sc["reference"], reverse=bool(sc["reverse"]), track_pcc=bool(tr["track_pcc"]),
        )
    except (ModelError, ScheduleError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    return Experiment(str(raw["name"]), raw, cfg)


def load(name_or_path: str, overrides=()) -> Experiment:
    return build(apply_overrides(read_raw(name_or_path), overrides))


def load_dataset(exp: Experiment) -> Dataset:
    d = exp.data
    src = d["source"]
    try:
        if src == "synthetic":
            return gen_synthetic(d["kind"], int(d["n"]), float(d["noise"]), int(d["seed"]),
                                 int(d["num_classes"]), int(d["dim"]))
        if src == "idx":
            for p in (d["images"], d["labels"]):
                if not p or not Path(p).is_file():
                    raise IOFailure(f"IDX file not found: {p}")
            full = load_idx(d["images"], d["labels"])
        elif src == "csv":
            if not d["path"] or not Path(d["path"]).is_file():
                raise IOFailure(f"CSV file not found: {d['path']}")
            full = load_csv(d["path"])
        else:
            raise ConfigError(f"unknown data source {src!r}")
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    n = d.get("n")
    if n is not None and int(n) < full.n:
        full = full.subset(full.ids[:int(n)])
    return full


def load_split(exp: Experiment) -> tuple[Dataset, Dataset]:
    data = load_dataset(exp)
    try:
        return split(data, float(exp.data["test_fraction"]), int(exp.data["split_seed"]))
    except DataError as exc:
        raise ConfigError(str(exc)) from None
