"""Command-line entry point: ``cpfield {sample,oracle,verify,theorem3,sweep} CONFIG``.

Every command is a pure function of the configuration file and flags, so
reruns produce byte-identical files. Exit codes: 0 pass, 1 statistical
failure, 2 configuration or precondition error, 3 I/O error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import oracle as _oracle
from .config import ConfigError, RunConfig, build_model, load_config
from .integrate import IntegrationError
from .model import ModelError, UnderCurve
from .ordering import write_grid_json
from .rng import RngStream
from .sampler import SamplingError, sample_field, write_samples_csv
from .verify import (
    Target,
    compare_to_oracle,
    convergence_sweep,
    run_replications,
    trend_non_increasing,
    write_sweep_csv,
)

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
OUT_ENV = "CPFIELD_OUT"
DEFAULT_OUT = "cpfield_out"
DEFAULT_GRID = (0.25, 0.5, 0.75)
CORNER_FRACTIONS = (0.25, 0.5, 0.75, 1.0)
DEFAULT_REPS = 500
# replicated statistics are indexed by point fractions, so verification
# always compares against the quantile-indexed oracle
VERIFY_MODE = "quantile_normalized"


class PreconditionError(ValueError):
    pass


# -- argument handling -----------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpfield", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *, seed=True, threads=True):
        p.add_argument("config", help="JSON configuration document")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        if seed:
            p.add_argument("--seed", type=int, help="root seed (default run.seed)")
        if threads:
            p.add_argument("--threads", type=int, help="worker threads (default run.threads)")

    p = sub.add_parser("sample", help="write realisations of the field")
    common(p)
    p.add_argument("--reps", type=int, default=1, help="number of realisations (default 1)")
    p.add_argument("--nu", type=float, help="override the intensity")

    p = sub.add_parser("oracle", help="write limit covariances")
    common(p, seed=False, threads=False)
    p.add_argument("--target", choices=("theorem1", "theorem2", "theorem3"))
    p.add_argument("--mode", choices=_oracle.MODES)
    p.add_argument("--grid", type=_float_list)

    for name, text in (("verify", "compare replications with the oracle"),
                       ("theorem3", "time/intensity paths and their covariance check")):
        p = sub.add_parser(name, help=text)
        common(p)
        if name == "verify":
            p.add_argument("--target", choices=("theorem1", "theorem2", "theorem3"))
            p.add_argument("--save-stats", action="store_true",
                           help="also write every replicated statistic")
            p.add_argument("--oracle-offset", type=float, default=0.0, help=argparse.SUPPRESS)
        p.add_argument("--reps", type=int)
        p.add_argument("--nu", type=float)
        p.add_argument("--tol", type=float)
        p.add_argument("--grid", type=_float_list)

    p = sub.add_parser("sweep", help="oracle deviation across intensities")
    common(p)
    p.add_argument("--target", choices=("theorem1", "theorem2", "theorem3"))
    p.add_argument("--nu-list", type=_float_list)
    p.add_argument("--reps", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--grid", type=_float_list)
    return ap


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: RunConfig) -> int:
    seed = cfg.run.seed if args.seed is None else args.seed
    if seed < 0:
        raise PreconditionError("--seed must be non-negative")
    return seed


def _threads(args, cfg: RunConfig) -> int:
    n = cfg.run.threads if args.threads is None else args.threads
    if n < 1:
        raise PreconditionError("--threads must be at least 1")
    return n


def _reps(args, cfg: RunConfig, minimum: int = 2) -> int:
    R = args.reps if args.reps is not None else (cfg.run.reps or DEFAULT_REPS)
    if R < minimum:
        raise PreconditionError(f"--reps must be at least {minimum}, got {R}")
    return R


def _tol(args, cfg: RunConfig) -> float:
    tol = cfg.run.tol if args.tol is None else args.tol
    if not tol >= 0:
        raise PreconditionError("--tol must be non-negative")
    return tol


def _default_kind(spec) -> str:
    if isinstance(spec.domain, UnderCurve) and spec.mean_free_of_x2():
        return "theorem3"
    if spec.marks.mean.is_zero():
        return "theorem2"
    return "theorem1"


def _target(args, cfg: RunConfig, spec, kind: str | None = None) -> Target:
    kind = kind or getattr(args, "target", None) or cfg.run.target or _default_kind(spec)
    grid = args.grid if args.grid is not None else cfg.run.grid
    if kind == "theorem1":
        if args.grid is None and cfg.run.corners is not None:
            return Target("theorem1", tuple(map(tuple, cfg.run.corners)))
        lo, hi = np.asarray(spec.domain.lower), np.asarray(spec.domain.upper)
        if grid is None:
            axes = [lo[k] + np.array(CORNER_FRACTIONS) * (hi[k] - lo[k]) for k in range(spec.d1)]
        else:
            axes = [np.asarray(grid, float)] * spec.d1
        mesh = np.array(np.meshgrid(*axes, indexing="ij")).reshape(spec.d1, -1).T
        return Target("theorem1", tuple(map(tuple, mesh)))
    return Target(kind, tuple(DEFAULT_GRID if grid is None else grid))


def _setup(args, nu=None):
    cfg = load_config(args.config)
    spec = build_model(cfg, nu)
    return cfg, spec


def _write_stats(path, batch) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "arg", "component", "value", "degenerate"])
        for r in range(batch.R):
            for a in range(batch.stats.shape[1]):
                for c in range(batch.stats.shape[2]):
                    w.writerow([r, a, c + 1, repr(float(batch.stats[r, a, c])),
                                int(batch.degenerate[r])])


def _report(report, out: Path, prefix: str = "report") -> int:
    report.write_json(out / f"{prefix}.json")
    report.write_csv(out / f"{prefix}.csv")
    s = report.summary()
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} {s['target']}: max |dev| {s['max_abs_dev']:.4g} "
          f"(worst entry dev {s['worst_dev']:.4g}, se {s['worst_se']:.3g}, tol {s['tol']:g}); "
          f"{s['n_reps']} reps, {s['n_degenerate']} empty")
    return EXIT_PASS if report.passed else EXIT_FAIL


# -- commands --------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg, spec = _setup(args, args.nu)
    seed = _seed(args, cfg)
    if args.reps < 1:
        raise PreconditionError("--reps must be at least 1")
    out = _out_dir(args)
    root = RngStream(seed)
    samples = [sample_field(spec, root.spawn(r)) for r in range(args.reps)]
    write_samples_csv(out / "samples.csv", samples)
    print(f"wrote {sum(s.eta for s in samples)} points in {args.reps} realisation(s)")
    return EXIT_PASS


def cmd_oracle(args) -> int:
    cfg, spec = _setup(args)
    target = _target(args, cfg, spec)
    mode = args.mode or cfg.run.mode
    out = _out_dir(args)
    block = _oracle.oracle_block(spec, target, mode)
    block.write_csv(out / "oracle.csv")
    block.write_metadata(out / "oracle.json")
    ratio = float(np.max(block.agreement_gap(), initial=0.0))
    print(f"{target.kind} oracle ({mode}): {len(target.args)} arguments, "
          f"min eigenvalue {block.min_eigenvalue():.3g}, max agreement ratio {ratio:.3g}")
    return EXIT_PASS


def cmd_verify(args) -> int:
    cfg, spec = _setup(args, args.nu)
    target = _target(args, cfg, spec)
    R, seed, tol, threads = _reps(args, cfg), _seed(args, cfg), _tol(args, cfg), _threads(args, cfg)
    out = _out_dir(args)
    block = _oracle.oracle_block(spec, target, VERIFY_MODE)
    if args.oracle_offset:
        block = block.shifted(args.oracle_offset)
    block.write_csv(out / "oracle.csv")
    batch = run_replications(spec, target, R, seed, threads=threads)
    if args.save_stats:
        _write_stats(out / "stats.csv", batch)
    return _report(compare_to_oracle(batch, block, tol), out)


def cmd_theorem3(args) -> int:
    cfg, spec = _setup(args, args.nu)
    if not isinstance(spec.domain, UnderCurve):
        raise PreconditionError("theorem3 needs an under_curve domain")
    target = _target(args, cfg, spec, "theorem3")
    R, seed, tol, threads = _reps(args, cfg), _seed(args, cfg), _tol(args, cfg), _threads(args, cfg)
    out = _out_dir(args)
    block = _oracle.oracle_block(spec, target, VERIFY_MODE)
    block.write_csv(out / "oracle.csv")
    batch = run_replications(spec, target, R, seed, threads=threads, keep_records=True)
    for j, name in enumerate(("time", "intensity")):
        with open(out / f"paths_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "t", "component", "value"])
            for rec in batch.records:
                for g, t in enumerate(rec.grid):
                    for c in range(rec.values.shape[2]):
                        w.writerow([rec.rep_index, repr(float(t)), c + 1,
                                    repr(float(rec.values[g, j, c]))])
    write_grid_json(out / "grid.json", grid=target.args, orderings=["time", "intensity"])
    return _report(compare_to_oracle(batch, block, tol), out)


def cmd_sweep(args) -> int:
    cfg, spec = _setup(args)
    nu_list = args.nu_list if args.nu_list is not None else cfg.run.nu_list
    if not nu_list or len(nu_list) < 2:
        raise PreconditionError("a sweep needs at least two intensities (--nu-list)")
    target = _target(args, cfg, spec)
    R, seed, tol, threads = _reps(args, cfg), _seed(args, cfg), _tol(args, cfg), _threads(args, cfg)
    out = _out_dir(args)
    rows = convergence_sweep(spec, target, sorted(nu_list), R, seed, tol=tol,
                             mode=VERIFY_MODE, threads=threads)
    write_sweep_csv(out / "sweep.csv", rows)
    for r in rows:
        print(f"nu={r.nu:g}: max |dev| {r.max_abs_dev:.4g}, max se {r.max_se:.3g}")
    ok = trend_non_increasing(rows)
    print(("PASS" if ok else "FAIL") + ": deviations non-increasing within 2 SE")
    return EXIT_PASS if ok else EXIT_FAIL


COMMANDS = {
    "sample": cmd_sample,
    "oracle": cmd_oracle,
    "verify": cmd_verify,
    "theorem3": cmd_theorem3,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_CONFIG
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", _oracle.AtomicIntensityWarning)
            code = COMMANDS[args.command](args)
        seen = set()
        for w in caught:
            msg = f"warning: {w.message}"
            if msg not in seen:
                seen.add(msg)
                print(msg, file=sys.stderr)
        return code
    except (IntegrationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PreconditionError, ModelError, SamplingError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
