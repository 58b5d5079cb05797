"""Discrete-time simulator for error-compensated compressed local SGD.

Every worker keeps a local iterate ``x_hat``, a residual memory ``memory`` and
an ``anchor`` (the last global parameter it received). Each step every worker
takes one local SGD step; workers whose schedule contains ``t + 1`` then send
the compressed value of ``memory + anchor - x_hat``, keep the compression
residual in memory, and receive the new global parameter.

The synchronous and asynchronous algorithms share this loop; they differ only
in whether all workers sync at the same steps, which decides which
diagnostic ceilings apply and whether the memory identity is checked.

RNG streams: worker ``r`` owns one numpy Generator per purpose (batch
sampling, compression), seeded by ``SeedSequence(seed, spawn_key=(r, purpose))``.
Streams are consumed in a fixed order, so serial and threaded execution give
bit-identical results.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj_mod
from .errors import ConfigError, ParameterError, QsparseError
from .metrics import VALUE_BITS, StepRecord, bit_cost
from .operators import compress, theoretical_gamma, validate
from .schedule import SyncSchedule

PURPOSE_BATCH = 0
PURPOSE_COMPRESS = 1


# -- learning rates ----------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    eta: float
    a: float = 1.0
    decaying = False

    def rate(self, t):
        return self.eta


@dataclass(frozen=True)
class InverseTime:
    xi: float
    a: float
    decaying = True

    def rate(self, t):
        return self.xi / (self.a + t)


@dataclass(frozen=True)
class StronglyConvex:
    mu: float
    a: float
    decaying = True

    def rate(self, t):
        return 8.0 / (self.mu * (self.a + t))


@dataclass(frozen=True)
class ExperimentConvex:
    c: float
    lam: float
    a: float
    decaying = True

    def rate(self, t):
        return self.c / (self.lam * (self.a + t))


LR_KINDS = {"fixed": Fixed, "inverse-time": InverseTime,
            "strongly-convex": StronglyConvex, "experiment-convex": ExperimentConvex}


def lr_problems(lr):
    out = []
    for name in ("eta", "xi", "mu", "c", "lam", "a"):
        v = getattr(lr, name, None)
        if v is not None and not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            out.append(f"lr.{name} must be a positive number, got {v!r}")
    return out


def fixed_rate_from_smoothness(L_hat, T, C_hat=None):
    """Fixed step C_hat / sqrt(T); C_hat defaults to 1 / (2 L_hat)."""
    if C_hat is None:
        C_hat = 1.0 / (2.0 * L_hat)
    return Fixed(C_hat / math.sqrt(T))


# -- rng ---------------------------------------------------------------------

def worker_rng(seed, worker, purpose):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(worker, purpose)))


# -- state -------------------------------------------------------------------

@dataclass
class WorkerState:
    id: int
    x_hat: np.ndarray
    memory: np.ndarray
    anchor: np.ndarray
    shard: np.ndarray | None
    batch_rng: np.random.Generator
    comp_rng: np.random.Generator
    x_tilde: np.ndarray | None = None
    last_grad: np.ndarray | None = None


@dataclass
class MasterState:
    x_global: np.ndarray
    weighted_sum: np.ndarray
    comp: np.ndarray
    S: float = 0.0
    S_comp: float = 0.0

    @property
    def x_bar(self):
        return self.weighted_sum / self.S


@dataclass
class RunConfig:
    R: int
    T: int
    b: int
    operator: object
    schedule: SyncSchedule
    lr: object
    objective: object
    data: obj_mod.Dataset | None = None
    shards: object = None
    seed: int = 0
    track_virtual: bool = True
    record_every: int = 1
    track_grad_norm: bool = False
    threads: int = 0
    x0: np.ndarray | None = None


@dataclass
class RunResult:
    x_final: np.ndarray
    x_hat_final: np.ndarray
    x_bar: np.ndarray
    records: list
    uplink_bits: int
    downlink_bits: int
    diagnostics: dict = field(default_factory=dict)


# -- primitive steps ---------------------------------------------------------

def local_step(worker, obj, data, eta_t, b):
    """One local SGD step in place; returns the stochastic gradient used."""
    if eta_t <= 0:
        raise ParameterError(f"learning rate must be positive, got {eta_t}")
    if worker.shard is None:
        g = obj_mod.grad(obj, worker.x_hat, data)
    else:
        pick = obj_mod.sample_batch(worker.batch_rng, worker.shard.size, b)
        g = obj_mod.grad(obj, worker.x_hat, data, worker.shard[pick])
    worker.x_hat -= eta_t * g
    if worker.x_tilde is not None:
        worker.x_tilde -= eta_t * g
    worker.last_grad = g
    return g


def sync_round(worker, operator):
    """Compress this worker's error-compensated progress.

    Returns (reconstruction, uplink bits). Memory becomes exactly the
    compression residual of the argument.
    """
    arg = worker.memory + worker.anchor - worker.x_hat
    g, payload = compress(operator, arg, worker.comp_rng)
    worker.memory = arg - g
    return g, bit_cost(operator, payload, arg.size)


def pairwise_sum(vectors):
    """Sum in the given order with a balanced reduction tree."""
    n = len(vectors)
    if n == 1:
        return vectors[0].copy()
    mid = n // 2
    return pairwise_sum(vectors[:mid]) + pairwise_sum(vectors[mid:])


def weighted_average_update(master, x_hat_mean, t, a):
    """Add (a+t)^2 x_hat_mean to the running weighted sum (compensated)."""
    w = (a + t) ** 2
    y = w * x_hat_mean - master.comp
    s = master.weighted_sum + y
    master.comp = (s - master.weighted_sum) - y
    master.weighted_sum = s
    ys = w - master.S_comp
    ss = master.S + ys
    master.S_comp = (ss - master.S) - ys
    master.S = ss


# -- diagnostic ceilings -----------------------------------------------------

def decay_constant(gamma, H, a):
    """Smallest admissible constant for the decaying-rate memory ceiling, or None if a <= 4H/gamma."""
    if a * gamma <= 4 * H:
        return None
    return 4 * a * gamma * (1 - gamma ** 2) / (a * gamma - 4 * H)


def ceilings(lr, t, gamma, H, G, synchronous):
    """(memory, local deviation, virtual gap) ceilings; None where undefined."""
    eta = lr.rate(t)
    g2h2 = G * G * H * H
    if not lr.decaying:
        dev = eta ** 2 * g2h2 if synchronous else None
        if gamma is None:
            return None, dev, None
        mem = 4 * eta ** 2 * (1 - gamma ** 2) / gamma ** 2 * g2h2
        if synchronous:
            return mem, dev, mem
        c1 = (16 / gamma ** 2 - 12) * (4 - 2 * gamma)
        dev = (2 + H * H * c1) * eta ** 2 * g2h2
        c2 = (4 - 2 * gamma) * (8 / gamma ** 2 - 6)
        gap = 6 * c2 * eta ** 2 * H ** 4 * G * G + 12 * eta ** 2 * (1 - gamma ** 2) / gamma ** 2 * g2h2
        return mem, dev, gap
    dev = 4 * eta ** 2 * g2h2 if synchronous else None
    C = None if gamma is None else decay_constant(gamma, H, lr.a)
    if C is None:
        return None, dev, None
    mem = 4 * eta ** 2 * C * g2h2 / gamma ** 2
    if synchronous:
        return mem, dev, mem
    c3 = 8 * (4 - 2 * gamma) * (1 + C / gamma ** 2)
    dev = 8 * (1 + c3 * H * H) * eta ** 2 * g2h2
    c4 = 192 * (4 - 2 * gamma) * (1 + C / gamma ** 2)
    gap = c4 * eta ** 2 * H ** 4 * G * G + 12 * C * eta ** 2 / gamma ** 2 * g2h2
    return mem, dev, gap


# -- validation --------------------------------------------------------------

def config_problems(cfg, require_sync=False):
    """Every problem with cfg, as a list of messages."""
    probs = []
    for name in ("R", "T", "b", "record_every"):
        v = getattr(cfg, name)
        if not isinstance(v, (int, np.integer)) or v < 1:
            probs.append(f"run.{name} must be a positive integer, got {v!r}")
    if not isinstance(cfg.threads, (int, np.integer)) or cfg.threads < 0:
        probs.append(f"threads must be a non-negative integer, got {cfg.threads!r}")
    probs += lr_problems(cfg.lr)
    d = None
    try:
        obj_mod.validate_objective(cfg.objective, cfg.data)
        d = obj_mod.param_dim(cfg.objective, cfg.data)
    except QsparseError as exc:
        probs.append(f"objective: {exc}")
    if d is not None:
        try:
            validate(cfg.operator, d)
        except QsparseError as exc:
            probs.append(f"operator: {exc}")
        if cfg.x0 is not None and np.shape(cfg.x0) != (d,):
            probs.append(f"x0 has shape {np.shape(cfg.x0)}, expected ({d},)")
    sch = cfg.schedule
    if sch.R != cfg.R:
        probs.append(f"schedule has {sch.R} workers but run.R={cfg.R}")
    if sch.T != cfg.T:
        probs.append(f"schedule horizon {sch.T} differs from run.T={cfg.T}")
    if require_sync and not sch.synchronous:
        probs.append("synchronous run needs identical schedules for all workers")
    try:
        if max(sch.gaps()) > sch.H:
            probs.append(f"schedule gap {max(sch.gaps())} exceeds H={sch.H}")
    except QsparseError as exc:
        probs.append(f"schedule: {exc}")
    if cfg.shards is not None:
        if cfg.shards.R != cfg.R:
            probs.append(f"shard plan has {cfg.shards.R} shards but run.R={cfg.R}")
        if any(len(a) == 0 for a in cfg.shards.assignment):
            probs.append("every shard must be non-empty")
    elif cfg.data is not None and cfg.data.n > 0:
        probs.append("a dataset was given without a shard plan")
    return probs


# -- main loop ---------------------------------------------------------------

def _make_workers(cfg, d):
    x0 = np.zeros(d) if cfg.x0 is None else np.array(cfg.x0, dtype=np.float64)
    workers = []
    for r in range(cfg.R):
        shard = None
        if cfg.shards is not None:
            shard = np.asarray(cfg.shards.assignment[r], dtype=np.int64)
        workers.append(WorkerState(
            id=r, x_hat=x0.copy(), memory=np.zeros(d), anchor=x0.copy(), shard=shard,
            batch_rng=worker_rng(cfg.seed, r, PURPOSE_BATCH),
            comp_rng=worker_rng(cfg.seed, r, PURPOSE_COMPRESS),
            x_tilde=x0.copy() if cfg.track_virtual else None,
        ))
    master = MasterState(x0.copy(), np.zeros(d), np.zeros(d))
    return workers, master


def _mean(vectors):
    return pairwise_sum(vectors) / len(vectors)


def _run(cfg, synchronous):
    d = obj_mod.param_dim(cfg.objective, cfg.data)
    workers, master = _make_workers(cfg, d)
    obj, data, lr, op = cfg.objective, cfg.data, cfg.lr, cfg.operator
    H = cfg.schedule.H
    gamma = theoretical_gamma(op, d)
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 0 else None

    def each(fn, items):
        if pool is None:
            return [fn(w) for w in items]
        return list(pool.map(fn, items))

    records = []
    uplink = downlink = 0
    G = 0.0
    diag = {
        "gamma": gamma, "H": H, "synchronous": synchronous,
        "max_memory_identity": 0.0 if synchronous and cfg.track_virtual else None,
        "max_mem_norm": 0.0, "max_mem_ratio": None,
        "max_local_dev": 0.0, "max_local_dev_ratio": None,
        "max_virtual_gap": 0.0 if cfg.track_virtual else None, "max_virtual_gap_ratio": None,
        "warnings": [],
    }
    if lr.decaying and gamma is not None and decay_constant(gamma, H, lr.a) is None:
        diag["warnings"].append(
            f"decaying-rate memory ceiling skipped: needs a > 4H/gamma = {4 * H / gamma:.6g}, got a={lr.a:.6g}")
    elif gamma is None:
        diag["warnings"].append("operator has no static compression coefficient; memory ceilings skipped")

    noise = [0.0]

    def ratio_max(key, value, bound):
        if bound is None:
            return
        if value <= noise[0]:
            value = 0.0
        r = value / bound if bound > 0 else (0.0 if value == 0 else math.inf)
        diag[key] = r if diag[key] is None else max(diag[key], r)

    def snapshot(t):
        xs = [w.x_hat for w in workers]
        x_mean = _mean(xs)
        # squared norms below this are rounding error (matters when a ceiling is exactly 0)
        noise[0] = d * (1e3 * np.finfo(float).eps * (1.0 + float(np.max(np.abs(x_mean))))) ** 2
        mem = [float(w.memory @ w.memory) for w in workers]
        dev = float(np.mean([np.sum((x_mean - x) ** 2) for x in xs]))
        vgap = None
        if cfg.track_virtual:
            x_tilde = _mean([w.x_tilde for w in workers])
            diff = x_mean - x_tilde
            vgap = float(diff @ diff)
            if synchronous:
                avg_mem = _mean([w.memory for w in workers])
                err = float(np.max(np.abs(diff - avg_mem))) / (1.0 + float(np.max(np.abs(x_mean))))
                diag["max_memory_identity"] = max(diag["max_memory_identity"], err)
        return x_mean, mem, dev, vgap

    try:
        for t in range(cfg.T + 1):
            x_mean, mem, dev, vgap = snapshot(t)
            bounds = ceilings(lr, t, gamma, H, G, synchronous) if t else (None, None, None)
            if t % cfg.record_every == 0 or t == cfg.T:
                gn = None
                if cfg.track_grad_norm:
                    gn = float(np.linalg.norm(obj_mod.grad(obj, x_mean, data)))
                records.append(StepRecord(t, obj_mod.loss(obj, x_mean, data), gn, uplink,
                                          mem, dev, vgap, *bounds))
            if t > 0:
                diag["max_mem_norm"] = max(diag["max_mem_norm"], max(mem))
                diag["max_local_dev"] = max(diag["max_local_dev"], dev)
                ratio_max("max_mem_ratio", max(mem), bounds[0])
                ratio_max("max_local_dev_ratio", dev, bounds[1])
                if vgap is not None:
                    diag["max_virtual_gap"] = max(diag["max_virtual_gap"], vgap)
                    ratio_max("max_virtual_gap_ratio", vgap, bounds[2])
            if t == cfg.T:
                break
            weighted_average_update(master, x_mean, t, lr.a)
            eta = lr.rate(t)
            grads = each(lambda w: local_step(w, obj, data, eta, cfg.b), workers)
            G = max(G, max(float(np.linalg.norm(g)) for g in grads))
            active = cfg.schedule.syncing(t + 1)
            if active.size == 0:
                continue
            syncing = [workers[r] for r in active]
            sent = each(lambda w: sync_round(w, op), syncing)
            uplink += sum(bits for _, bits in sent)
            master.x_global = master.x_global - pairwise_sum([g for g, _ in sent]) / cfg.R
            for w in syncing:
                w.anchor = master.x_global.copy()
                w.x_hat = master.x_global.copy()
            downlink += VALUE_BITS * d * len(syncing)
    finally:
        if pool is not None:
            pool.shutdown()

    diag["G_hat"] = G
    for key, label in (("max_mem_ratio", "memory"), ("max_local_dev_ratio", "local deviation"),
                       ("max_virtual_gap_ratio", "virtual gap")):
        if diag[key] is not None and diag[key] > 1.0:
            msg = f"{label} exceeded its ceiling by a factor {diag[key]:.3g}"
            diag["warnings"].append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
    diag["S"] = master.S
    return RunResult(
        x_final=master.x_global.copy(),
        x_hat_final=_mean([w.x_hat for w in workers]),
        x_bar=master.x_bar,
        records=records,
        uplink_bits=int(uplink),
        downlink_bits=int(downlink),
        diagnostics=diag,
    )


def _checked(cfg, require_sync):
    probs = config_problems(cfg, require_sync)
    if probs:
        raise ConfigError(probs)


def run_sync(cfg):
    """All workers share one schedule and sync together."""
    _checked(cfg, require_sync=True)
    return _run(cfg, synchronous=True)


def run_async(cfg):
    """Each worker follows its own schedule against its own stale anchor."""
    _checked(cfg, require_sync=False)
    return _run(cfg, synchronous=False)


def run(cfg):
    return run_sync(cfg) if cfg.schedule.synchronous else run_async(cfg)
