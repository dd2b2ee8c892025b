"""Command-line front end: ``solve``, ``bench`` and ``validate``.

Exit codes: 0 converged (or validation passed), 2 not converged (or
validation failed), 1 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import multiprocessing as mp
import os
import sys
import time

import numpy as np

from .amen import AmenConfig, amen_solve
from .models import DENSE_GUARD, KINDS, ModelSpec, assemble_dense, build_model, validate_model
from .multigrid import MGConfig, multigrid_solve, reference_residual
from .numkit import NotIrreducibleError, dense_stationary
from .report import tensor_checksum
from .tt import kron_to_tt_operator, save_ttf1

METHODS = ("amen", "multigrid", "multigrid-amen")
DEFAULT_BUDGET = 3600.0
TIMEOUT_MARK = "---"

log = logging.getLogger("ttmc")


class ConfigError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("TTMC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run_method(model, method, tol_orders=2.0, max_iter=None, seed=0, budget=None):
    """Run one of the three methods with the stopping rule ``||Ax|| <= 10^-tol ||Au||``."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "amen":
        op = kron_to_tt_operator(model)
        ref = reference_residual(op, model.modes)
        target = 10.0 ** (-tol_orders) * ref
        cfg = AmenConfig(
            residual_target=target,
            max_sweeps=max_iter or 50,
            seed=seed,
            time_budget=budget,
        )
        x, rep = amen_solve(op, "constrained", cfg)
        rep.reference_residual, rep.target = ref, target
        rep.method = "amen"
        return x, rep
    coarse = "amen" if method == "multigrid-amen" else "direct"
    cfg = MGConfig(
        tol_orders=tol_orders,
        max_cycles=max_iter or 100,
        coarse=coarse,
        time_budget=budget,
        coarse_amen=AmenConfig(max_sweeps=5, enrichment_rank=3, seed=seed),
        init_amen=AmenConfig(max_sweeps=10, seed=seed),
    )
    return multigrid_solve(model, cfg)


def _spec_from_args(args):
    if args.spec_file:
        try:
            with open(args.spec_file) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read spec file: {exc}") from exc
        if args.d is not None:
            data["d"] = args.d
        if args.cap is not None:
            data["cap"] = args.cap
    else:
        if not args.model:
            raise ConfigError("either --model or --spec-file is required")
        data = {"kind": args.model, "d": args.d if args.d is not None else 4, "cap": args.cap if args.cap is not None else 16}
    try:
        return ModelSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _oracle_error(model, x):
    if model.size > DENSE_GUARD:
        raise ConfigError(f"oracle check needs at most {DENSE_GUARD} states, model has {model.size}")
    pi = dense_stationary(assemble_dense(model))
    return float(np.max(np.abs(x.to_vector() - pi)))


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
    if path in (None, "-"):
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def cmd_solve(args):
    spec = _spec_from_args(args)
    model = build_model(spec)
    x, rep = run_method(model, args.method, args.tol_orders, args.max_iter, args.seed, args.budget_seconds)
    rep.checksum = tensor_checksum(x)
    rep.config["model"] = spec.to_dict()
    rep.config["method"] = args.method
    rep.config["seed"] = args.seed
    rep.config["tol_orders"] = args.tol_orders
    if args.check_oracle:
        rep.telemetry["oracle_max_error"] = _oracle_error(model, x)
    if args.save_solution:
        save_ttf1(args.save_solution, x)
    _write_json(args.out, rep.to_dict())
    summary = f"{args.method} {spec.kind} d={spec.d} cap={spec.cap}: {rep.status} after {rep.iterations} iterations, max rank {rep.max_rank}"
    if "oracle_max_error" in rep.telemetry:
        summary += f", oracle error {rep.telemetry['oracle_max_error']:.2e}"
    print(summary, file=sys.stderr)
    return 0 if rep.converged else 2


def _bench_worker(queue, kind, d, cap, method, tol_orders, max_iter, seed, budget):
    model = build_model(ModelSpec(kind, d, cap))
    _, rep = run_method(model, method, tol_orders, max_iter, seed, budget)
    queue.put((rep.wall_time, rep.iterations, rep.max_rank, rep.status))


def _bench_one(kind, d, cap, method, tol_orders, max_iter, seed, budget):
    """One benchmark run in a child process, killed after twice the budget."""
    ctx = mp.get_context("fork")
    queue = ctx.Queue()
    proc = ctx.Process(target=_bench_worker, args=(queue, kind, d, cap, method, tol_orders, max_iter, seed, budget))
    t0 = time.perf_counter()
    proc.start()
    proc.join(2.0 * budget)
    if proc.is_alive():
        proc.terminate()
        proc.join()
        return time.perf_counter() - t0, None, None, "timeout"
    if queue.empty():
        return time.perf_counter() - t0, None, None, "failed"
    return queue.get()


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def cmd_bench(args):
    kinds = args.model.split(",") if args.model else ["overflow"]
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown model kind {k!r}")
    methods = args.methods.split(",") if args.methods else list(METHODS)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    ds = _int_list(args.d_list) if args.d_list else [args.d if args.d is not None else 4]
    caps = _int_list(args.cap_list) if args.cap_list else [args.cap if args.cap is not None else 16]
    budget = args.budget_seconds
    fields = ["model", "d", "cap", "method", "time", "iter", "rank", "status"]
    rows = []
    for kind in kinds:
        for d in ds:
            for cap in caps:
                for method in methods:
                    wall, its, rank, status = _bench_one(kind, d, cap, method, args.tol_orders, args.max_iter, args.seed, budget)
                    if status == "converged":
                        row = [kind, d, cap, method, f"{wall:.2f}", its, rank, status]
                    else:
                        row = [kind, d, cap, method, TIMEOUT_MARK, TIMEOUT_MARK, TIMEOUT_MARK, status]
                    rows.append(row)
                    print(",".join(str(v) for v in row), file=sys.stderr)
    out = open(args.out, "w", newline="") if args.out and args.out != "-" else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(fields)
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_validate(args):
    spec = _spec_from_args(args)
    model = build_model(spec)
    if model.size > DENSE_GUARD:
        raise ConfigError(f"validate needs at most {DENSE_GUARD} states, model has {model.size}")
    check = validate_model(model)
    result = {
        "model": spec.to_dict(),
        "column_sum_defect": check.column_sum_defect,
        "negativity_defect": check.negativity_defect,
        "strongly_connected": check.strongly_connected,
        "model_ok": check.ok,
    }
    ok = check.ok
    if check.ok:
        x, rep = run_method(model, args.method, args.tol_orders, args.max_iter, args.seed, args.budget_seconds)
        try:
            err = _oracle_error(model, x)
        except NotIrreducibleError as exc:
            err, result["oracle_failure"] = None, str(exc)
        result.update(method=args.method, status=rep.status, iterations=rep.iterations, oracle_max_error=err)
        ok = rep.converged and err is not None and err <= args.error_tol
    result["ok"] = bool(ok)
    _write_json(args.out, result)
    return 0 if ok else 2


def build_parser():
    parser = argparse.ArgumentParser(prog="ttmc", description="TT steady-state solvers for Kronecker-structured Markov chains")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, tol_default):
        p.add_argument("--model", help=f"model kind ({', '.join(KINDS)})")
        p.add_argument("--spec-file", help="model spec JSON (kind, d, cap, optional rate overrides)")
        p.add_argument("--d", type=int, help="number of subsystems")
        p.add_argument("--cap", type=int, help="capacity per subsystem (mode size cap+1)")
        p.add_argument("--max-iter", type=int, help="maximum sweeps (amen) or cycles (multigrid)")
        p.add_argument("--tol-orders", type=float, default=tol_default, help="orders of residual reduction relative to the uniform vector")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output path ('-' or omitted: stdout)")
        p.add_argument("--budget-seconds", type=float, default=DEFAULT_BUDGET)

    p = sub.add_parser("solve", help="solve one model")
    common(p, 2.0)
    p.add_argument("--method", choices=METHODS, default="multigrid-amen")
    p.add_argument("--save-solution", help="write the solution as a TTF1 file")
    p.add_argument("--check-oracle", action="store_true", help="compare with the dense stationary vector")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="sweep d or cap and write a CSV table")
    common(p, 2.0)
    p.add_argument("--d-list", help="comma-separated list of d values")
    p.add_argument("--cap-list", help="comma-separated list of capacities")
    p.add_argument("--methods", help="comma-separated methods (default: all three)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="check a small model and compare a method with the dense oracle")
    common(p, 6.0)
    p.add_argument("--method", choices=METHODS, default="multigrid-amen")
    p.add_argument("--error-tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
