"""Experiment config files: TOML or JSON, presets, overrides and validation.

A config is a document with sections ``run``, ``operator``, ``schedule``,
``lr``, ``objective``, ``data`` and ``output``. Every problem found is
collected and reported together as a :class:`ConfigError`.
"""
from __future__ import annotations

import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import engine
from . import objectives as obj_mod
from . import operators
from . import schedule as sched_mod
from .errors import ConfigError, QsparseError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("run", "operator", "schedule", "lr", "objective", "data", "output")
REQUIRED = ("run", "operator", "schedule", "lr", "objective")

# c for the softmax preset; tuned so that the first step is of order 1
CONVEX_PRESET_C = 0.01

PRESETS = {
    "paper-convex": {
        "run": {"R": 15, "b": 8, "T": 3000, "seed": 0},
        "operator": {"kind": "signcomp", "m": 2, "sparsifier": {"kind": "topk", "k": 40}},
        "schedule": {"mode": "periodic", "H": 8},
        "lr": {"kind": "experiment-convex", "c": CONVEX_PRESET_C},
        "objective": {"kind": "softmax"},
        "data": {"source": "synthetic", "n": 2000, "d_in": 20, "classes": 10, "margin": 4.0, "seed": 0},
    },
}

_KEYS = {
    "run": {"R", "T", "b", "seed", "record_every", "track_virtual", "track_grad_norm"},
    "schedule": {"mode", "H", "seed", "indices"},
    "lr": {"kind", "eta", "xi", "mu", "c", "lambda", "a", "C_hat"},
    "objective": {"kind", "d", "mu", "L", "seed", "lambda", "n_classes", "alpha"},
    "data": {"source", "n", "d_in", "classes", "margin", "seed", "sigma", "images", "labels",
             "shard", "shard_seed"},
    "output": {"dir", "prefix"},
}


def load_document(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from exc
    try:
        if path.suffix == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(doc, overrides):
    """Apply ``section.key=value`` strings; values use TOML syntax, bare words are strings."""
    doc = copy.deepcopy(doc)
    problems = []
    for item in overrides:
        key, sep, text = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) < 2 or not all(parts):
            problems.append(f"override {item!r} must look like section.key=value")
            continue
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"override {item!r}: {p} is not a table")
                break
        else:
            node[parts[-1]] = _parse_value(text.strip())
    if problems:
        raise ConfigError(problems)
    return doc


def _merge(base, top):
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def with_preset(doc, name):
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; available: {', '.join(PRESETS)}"])
    return _merge(PRESETS[name], doc)


class _Section:
    """Typed access to one section, recording problems instead of raising."""

    def __init__(self, name, doc, problems):
        self.name = name
        self.doc = doc
        self.problems = problems

    def _bad(self, key, want):
        self.problems.append(f"{self.name}.{key}: expected {want}, got {self.doc.get(key)!r}")

    def int(self, key, default=None, minimum=None):
        v = self.doc.get(key, default)
        if v is None:
            self.problems.append(f"{self.name}.{key} is required")
            return None
        if isinstance(v, bool) or not isinstance(v, int) or (minimum is not None and v < minimum):
            self._bad(key, "an integer" + (f" >= {minimum}" if minimum is not None else ""))
            return None
        return v

    def num(self, key, default=None, positive=True, required=True):
        v = self.doc.get(key, default)
        if v is None:
            if required:
                self.problems.append(f"{self.name}.{key} is required")
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (positive and not v > 0):
            self._bad(key, "a positive number" if positive else "a number")
            return None
        return float(v)

    def str(self, key, choices, default=None):
        v = self.doc.get(key, default)
        if v not in choices:
            self._bad(key, "one of " + ", ".join(map(repr, choices)))
            return None
        return v

    def bool(self, key, default):
        v = self.doc.get(key, default)
        if not isinstance(v, bool):
            self._bad(key, "true or false")
            return default
        return v


def _check_keys(doc, problems):
    for name in doc:
        if name not in SECTIONS:
            problems.append(f"unknown section [{name}]")
    for name in REQUIRED:
        if name not in doc:
            problems.append(f"missing section [{name}]")
        elif not isinstance(doc[name], dict):
            problems.append(f"[{name}] must be a table")
    for name, allowed in _KEYS.items():
        sec = doc.get(name)
        if isinstance(sec, dict):
            for key in sec:
                if key not in allowed:
                    problems.append(f"unknown key {name}.{key}")


def _build_objective(doc, problems):
    sec = _Section("objective", doc.get("objective", {}), problems)
    kind = sec.str("kind", ("quadratic", "softmax", "nonconvex-logistic"))
    if kind == "quadratic":
        d = sec.int("d", minimum=1)
        mu = sec.num("mu", 1.0)
        L = sec.num("L", 10.0)
        seed = sec.int("seed", 0, minimum=0)
        if None in (d, mu, L, seed):
            return None
        try:
            return obj_mod.make_quadratic(d, mu, L, seed)
        except QsparseError as exc:
            problems.append(f"objective: {exc}")
            return None
    if kind == "softmax":
        lam = sec.num("lambda", required=False)
        L = sec.doc.get("n_classes")
        if L is not None:
            L = sec.int("n_classes", minimum=2)
        return obj_mod.Softmax(lam, L)
    if kind == "nonconvex-logistic":
        alpha = sec.num("alpha", 0.1)
        return None if alpha is None else obj_mod.NonConvexLogistic(alpha)
    return None


def _build_data(doc, objective, problems):
    sec = _Section("data", doc.get("data", {}), problems)
    default = "none" if isinstance(objective, obj_mod.Quadratic) else "synthetic"
    source = sec.str("source", ("synthetic", "idx", "noise", "none"), default)
    ds = None
    try:
        if source == "synthetic":
            args = (sec.int("n", 2000, minimum=1), sec.int("d_in", 20, minimum=1),
                    sec.int("classes", 10, minimum=2), sec.num("margin", 4.0, positive=False),
                    sec.int("seed", 0, minimum=0))
            if None not in args:
                ds = data_mod.synthetic_classification(*args)
        elif source == "idx":
            for key in ("images", "labels"):
                if not isinstance(sec.doc.get(key), str):
                    problems.append(f"data.{key} must be a file path")
            if isinstance(sec.doc.get("images"), str) and isinstance(sec.doc.get("labels"), str):
                ds = data_mod.load_idx(sec.doc["images"], sec.doc["labels"])
        elif source == "noise":
            if not isinstance(objective, obj_mod.Quadratic):
                problems.append("data.source = 'noise' only applies to the quadratic objective")
            else:
                args = (sec.int("n", 1000, minimum=1), objective.dim,
                        sec.num("sigma", 1.0, positive=False), sec.int("seed", 0, minimum=0))
                if None not in args:
                    ds = obj_mod.quadratic_noise(*args)
    except QsparseError as exc:
        problems.append(f"data: {exc}")
    mode = sec.str("shard", data_mod.SHARD_MODES, "iid-random")
    shard_seed = sec.int("shard_seed", 0, minimum=0)
    return ds, mode, shard_seed


def _build_schedule(doc, T, R, problems):
    sec = _Section("schedule", doc.get("schedule", {}), problems)
    mode = sec.str("mode", ("periodic", "random-async", "explicit"))
    if T is None or R is None or mode is None:
        return None
    try:
        if mode == "periodic":
            H = sec.int("H", minimum=1)
            return None if H is None else sched_mod.make_periodic(T, H, R)
        if mode == "random-async":
            H, seed = sec.int("H", minimum=1), sec.int("seed", 0, minimum=0)
            return None if None in (H, seed) else sched_mod.make_random_async(T, H, R, seed)
        idx = sec.doc.get("indices")
        if not isinstance(idx, list) or len(idx) != R or not all(isinstance(p, list) for p in idx):
            problems.append(f"schedule.indices must be a list of {R} integer lists")
            return None
        return sched_mod.from_indices(idx, T, sec.doc.get("H"))
    except QsparseError as exc:
        problems.append(f"schedule: {exc}")
        return None


def _build_lr(doc, objective, data, operator, schedule, T, problems):
    sec = _Section("lr", doc.get("lr", {}), problems)
    kind = sec.str("kind", tuple(engine.LR_KINDS) + ("smoothness",))
    if kind == "fixed":
        eta = sec.num("eta")
        return None if eta is None else engine.Fixed(eta)
    if kind == "smoothness":
        if objective is None or T is None:
            return None
        C_hat = sec.num("C_hat", required=False)
        try:
            consts = obj_mod.estimate_constants(objective, data, 4, np.random.default_rng(0))
        except QsparseError as exc:
            problems.append(f"lr: cannot estimate smoothness: {exc}")
            return None
        return engine.fixed_rate_from_smoothness(consts.L_hat, T, C_hat)
    if kind == "inverse-time":
        xi, a = sec.num("xi"), sec.num("a")
        return None if None in (xi, a) else engine.InverseTime(xi, a)
    if kind == "strongly-convex":
        mu, a = sec.num("mu"), sec.num("a")
        return None if None in (mu, a) else engine.StronglyConvex(mu, a)
    if kind == "experiment-convex":
        c = sec.num("c")
        lam = sec.num("lambda", required=False)
        if lam is None and "lambda" not in sec.doc:
            if isinstance(objective, obj_mod.Softmax) and data is not None:
                lam = obj_mod.reg_lambda(objective, data)
            else:
                problems.append("lr.lambda is required unless the objective is softmax")
        a = sec.num("a", required=False)
        if a is None and "a" not in sec.doc:
            # a = dH/k when the operator has a sparsifier
            k = getattr(getattr(operator, "sparsifier", None), "k", None)
            if k and schedule is not None and objective is not None and data is not None:
                a = obj_mod.param_dim(objective, data) * schedule.H / k
            else:
                problems.append("lr.a is required unless the operator has a sparsifier")
        return None if None in (c, lam, a) else engine.ExperimentConvex(c, lam, a)
    return None


def build(doc, threads=0):
    """Turn a config document into (RunConfig, output dict); raise ConfigError on any problem."""
    problems = []
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a table of sections"])
    _check_keys(doc, problems)
    run = _Section("run", doc.get("run", {}) if isinstance(doc.get("run"), dict) else {}, problems)
    R = run.int("R", minimum=1)
    T = run.int("T", minimum=1)
    b = run.int("b", 1, minimum=1)
    seed = run.int("seed", 0, minimum=0)
    record_every = run.int("record_every", 1, minimum=1)
    track_virtual = run.bool("track_virtual", True)
    track_grad_norm = run.bool("track_grad_norm", False)

    op = None
    if isinstance(doc.get("operator"), dict):
        try:
            op = operators.spec_from_dict(doc["operator"])
        except QsparseError as exc:
            problems.append(str(exc))
    objective = _build_objective(doc, problems) if isinstance(doc.get("objective"), dict) else None
    data, shard_mode, shard_seed = _build_data(doc, objective, problems)
    schedule = _build_schedule(doc, T, R, problems) if isinstance(doc.get("schedule"), dict) else None
    lr = None
    if isinstance(doc.get("lr"), dict):
        lr = _build_lr(doc, objective, data, op, schedule, T, problems)

    shards = None
    if data is not None and R is not None and shard_mode is not None:
        try:
            shards = data_mod.shard(data, R, shard_mode, shard_seed)
        except QsparseError as exc:
            problems.append(f"data: {exc}")

    out = doc.get("output", {})
    out = {"dir": str(out.get("dir", ".")), "prefix": str(out.get("prefix", "run"))}

    if problems:
        raise ConfigError(problems)
    cfg = engine.RunConfig(
        R=R, T=T, b=b, operator=op, schedule=schedule, lr=lr, objective=objective,
        data=data, shards=shards, seed=seed, track_virtual=track_virtual,
        record_every=record_every, track_grad_norm=track_grad_norm, threads=threads,
    )
    probs = engine.config_problems(cfg)
    if probs:
        raise ConfigError(probs)
    return cfg, out
