"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
``QSPARSE_THREADS`` caps the worker thread pool used by ``run`` (0 = serial).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import engine, kernels, metrics
from . import objectives as obj_mod
from . import operators
from .errors import ConfigError, ParameterError, QsparseError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _err(msg):
    print(f"qsparse: error: {msg}", file=sys.stderr)


def threads_from_env(environ=None):
    environ = os.environ if environ is None else environ
    raw = environ.get("QSPARSE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([f"QSPARSE_THREADS must be a non-negative integer, got {raw!r}"]) from None
    if n < 0:
        raise ConfigError([f"QSPARSE_THREADS must be a non-negative integer, got {raw!r}"])
    return n


def _jsonable_doc(doc):
    return json.loads(json.dumps(doc, default=str))


def cmd_run(args):
    doc = {} if args.config is None else config_mod.load_document(args.config)
    if args.preset:
        doc = config_mod.with_preset(doc, args.preset)
    doc = config_mod.apply_overrides(doc, args.set or [])
    cfg, out = config_mod.build(doc, threads=threads_from_env())
    result = engine.run(cfg)
    out_dir = Path(args.out_dir or out["dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise QsparseError(f"cannot create output dir {out_dir}: {exc.strerror or exc}") from exc
    metrics.emit_csv(result.records, out_dir / f"{out['prefix']}.csv")
    metrics.emit_summary_json(result, out_dir / f"{out['prefix']}.json", config=_jsonable_doc(doc))
    for w in result.diagnostics.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    print(f"final_loss={result.records[-1].loss:.10g} uplink_bits={result.uplink_bits}")
    return EXIT_OK


def cmd_check_ops(args):
    if args.d < 1 or args.trials < 1:
        raise ParameterError("d and trials must be positive")
    rng = np.random.default_rng(args.seed)
    catalog = operators.default_catalog(args.d)
    if args.only:
        wanted = set(args.only)
        unknown = wanted - {name for name, _ in catalog}
        if unknown:
            raise ParameterError(f"unknown catalog operator(s): {', '.join(sorted(unknown))}")
        catalog = [(n, s) for n, s in catalog if n in wanted]
    if args.operator:
        spec = operators.spec_from_dict(json.loads(args.operator))
        catalog.append(("custom", spec))
    for name, spec in catalog:
        operators.validate(spec, args.d)
    header = f"{'operator':<22}{'beta':>10}{'gamma':>12}{'mean ratio':>12}{'max ratio':>12}{'1-gamma':>10}  result"
    print(header)
    failed = 0
    for name, spec in catalog:
        rep = operators.empirical_compression_check(spec, args.d, args.trials, rng, args.distribution)
        g = rep.gamma_theoretical if rep.gamma_theoretical is not None else rep.data_gamma_mean
        fmt = lambda v: "-" if v is None else f"{v:.4g}"
        status = "PASS" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{name:<22}{fmt(rep.beta):>10}{fmt(g):>12}{rep.empirical_ratio:>12.4g}"
              f"{rep.max_ratio:>12.4g}{fmt(None if g is None else 1 - g):>10}  {status}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _gradcheck_problem(kind, rng):
    if kind == "quadratic":
        return obj_mod.make_quadratic(12, 1.0, 10.0, int(rng.integers(2**31))), None
    if kind == "softmax":
        ds = data_mod.synthetic_classification(60, 6, 3, 3.0, int(rng.integers(2**31)))
        return obj_mod.Softmax(lam=0.1), ds
    if kind == "nonconvex-logistic":
        ds = data_mod.synthetic_classification(60, 6, 2, 3.0, int(rng.integers(2**31)))
        return obj_mod.NonConvexLogistic(alpha=0.5), ds
    raise ParameterError(f"unknown objective {kind!r}")


def gradcheck(obj, data, points, rng, h=1e-5, scale=1.0):
    """Largest relative central-difference error over random points.

    Per coordinate the error is |g - fd| / max(1, |g|, |fd|).
    """
    d = obj_mod.param_dim(obj, data)
    worst = 0.0
    for _ in range(points):
        w = scale * rng.standard_normal(d)
        subset = None
        if data is not None:
            subset = rng.integers(0, data.n, size=min(8, data.n))
        g = obj_mod.grad(obj, w, data, subset)
        fd = np.empty(d)
        e = np.zeros(d)
        for i in range(d):
            e[i] = h
            fd[i] = (obj_mod.loss(obj, w + e, data, subset) - obj_mod.loss(obj, w - e, data, subset)) / (2 * h)
            e[i] = 0.0
        err = np.abs(g - fd) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
        worst = max(worst, float(err.max()))
    return worst


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    kinds = ["quadratic", "softmax", "nonconvex-logistic"] if args.objective == "all" else [args.objective]
    ok = True
    for kind in kinds:
        obj, ds = _gradcheck_problem(kind, rng)
        err = gradcheck(obj, ds, args.points, rng)
        passed = err <= args.tol
        ok &= passed
        print(f"{kind:<20} max_rel_error={err:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_gen_data(args):
    if args.n < 1:
        raise ParameterError(f"n must be >= 1, got {args.n}")
    ds = data_mod.synthetic_classification(args.n, args.d_in, args.classes, args.margin, args.seed)
    ds = data_mod.to_unit_grid(ds)
    out = Path(args.out)
    images = out.with_name(out.name + "-images.idx")
    labels = out.with_name(out.name + "-labels.idx")
    data_mod.write_idx(ds, images, labels)
    print(f"wrote {images} and {labels}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="qsparse", description="Compressed local SGD simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s (kernels: {kernels.BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("config", nargs="?", help="TOML or JSON config (optional with --preset)")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    r.add_argument("--preset", choices=sorted(config_mod.PRESETS), help="start from a built-in config")
    r.add_argument("--out-dir", help="override [output].dir")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check-ops", help="Monte-Carlo check of the operator catalog")
    c.add_argument("--d", type=int, default=256)
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--distribution", choices=("normal", "heavy", "sparse"), default="normal")
    c.add_argument("--only", nargs="+", metavar="NAME", help="restrict to these catalog entries")
    c.add_argument("--operator", metavar="JSON", help="also check this operator spec")
    c.set_defaults(func=cmd_check_ops)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--objective", choices=("all", "quadratic", "softmax", "nonconvex-logistic"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=100)
    g.add_argument("--tol", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write a synthetic classification set in IDX format")
    d.add_argument("out", help="output path prefix; writes PREFIX-images.idx and PREFIX-labels.idx")
    d.add_argument("--n", type=int, default=2000)
    d.add_argument("--d-in", type=int, default=20)
    d.add_argument("--classes", type=int, default=10)
    d.add_argument("--margin", type=float, default=4.0)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for prob in exc.problems:
            _err(prob)
        return EXIT_INVALID
    except (ParameterError, json.JSONDecodeError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    except (QsparseError, OSError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
