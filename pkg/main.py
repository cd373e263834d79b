import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from bnb import SolveStats, SolveStatus, solve_miqp, solve_pc
from cache_handler import ParameterCache
from errors import (DimensionMismatch, IndivisibleSections, InfeasibleProblem, InstanceIoError, ParseError,
                    SolverError)
from generators import GenSpec, generate
from model import Instance, SolverPoint, read_instance, validate, write_instance
from qp import QpStatus
from reformulate import (RHO_METHODS, BoundReport, bound_compare, build_lcr, build_plain,
                         build_qcr, lcr_params, select_rho, solve_sdp_a)
from results_manager import ResultsManager, RunRecord
from settings_manager import SettingsManager

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_LIMIT = 4
EXIT_INFEASIBLE = 5

REFORMS = ("plain", "lcr", "pc", "qcr")
STATUS_EXIT = {
    SolveStatus.OPTIMAL: EXIT_OK,
    SolveStatus.GAP_REACHED: EXIT_OK,
    SolveStatus.TIME_LIMIT: EXIT_LIMIT,
    SolveStatus.NODE_LIMIT: EXIT_LIMIT,
    SolveStatus.INFEASIBLE: EXIT_INFEASIBLE,
}


# --- shared pipeline ---

def make_settings(args) -> SettingsManager:
    manager = SettingsManager(getattr(args, "settings", None))
    threads = getattr(args, "threads", None)
    deterministic = getattr(args, "deterministic", None)
    if deterministic is None and threads is not None and threads > 1:
        deterministic = False
    manager.update_settings({
        "conic_eps": getattr(args, "conic_eps", None),
        "conic_max_iter": getattr(args, "conic_max_iter", None),
        "rel_gap": getattr(args, "gap", None),
        "time_limit": getattr(args, "time_limit", None),
        "node_limit": getattr(args, "node_limit", None),
        "threads": threads,
        "deterministic": deterministic,
        "rho_method": getattr(args, "rho", None),
    })
    return manager


def run_reform(inst: Instance, reform: str, manager: SettingsManager,
               cache: Optional[ParameterCache] = None) -> Tuple[Optional[SolverPoint], float, SolveStats, Dict[str, float]]:
    """
    Build the chosen reformulation and branch on it; returns (point, objective,
    stats, timings). An empty relaxation is reported with status Infeasible.
    """
    timings: Dict[str, float] = {}

    try:
        point, value, stats = _dispatch(inst, reform, manager, cache, timings)
    except InfeasibleProblem as e:
        logger.info(f"{reform}: {e}")
        point, value, stats = None, float("inf"), SolveStats(status=SolveStatus.INFEASIBLE)

    timings["time_bnb"] = stats.wall_time
    timings["time_total"] = sum(timings.values())
    return point, value, stats, timings


def _dispatch(inst: Instance, reform: str, manager: SettingsManager, cache: Optional[ParameterCache],
              timings: Dict[str, float]):
    conic = manager.conic_settings()
    solve = manager.solve_settings()
    rho_method = manager.get_setting("rho_method")
    if reform not in REFORMS:
        raise ValueError(f"unknown reformulation '{reform}'")
    plain = build_plain(inst)
    if reform == "plain":
        return solve_miqp(plain, solve)
    if plain.relax(settings=solve.qp).status is QpStatus.INFEASIBLE:
        raise InfeasibleProblem("continuous relaxation is infeasible; parameter stages skipped")

    if reform == "lcr":
        params = lcr_params(inst, conic, rho_method=rho_method, cache=cache)
        timings["time_sdp_l"] = params.time_sdp_l
        timings["time_socp"] = params.time_socp
        return solve_miqp(build_lcr(inst, params.lift), solve)
    if reform == "pc":
        stage = f"rho:{rho_method}:{conic.eps:g}"

        def compute():
            return select_rho(inst, rho_method, conic)

        chosen = cache.get_or_compute(inst, stage, compute) if cache is not None else compute()
        timings["time_sdp_l"] = chosen.seconds
        return solve_pc(inst, chosen.rho, solve)

    # qcr
    start = time.perf_counter()
    params, _ = solve_sdp_a(inst, conic)
    timings["time_sdp_l"] = time.perf_counter() - start
    return solve_miqp(build_qcr(inst, params), solve)


def _load(path) -> Instance:
    inst = read_instance(path)
    for problem in validate(inst):
        logger.warning(f"{path}: {problem}")
    return inst


def _metadata_fields(inst: Instance) -> Dict:
    meta = inst.metadata
    return {
        "family": meta.get("family"),
        "n": inst.n,
        "K": inst.cardinality,
        "dominance": meta.get("dominance"),
        "sections": meta.get("sections"),
        "seed": meta.get("seed"),
    }


def _report_fields(report: BoundReport) -> Dict:
    return {
        "bound_plain": report.bound_plain,
        "bound_pr": report.bound_pr,
        "bound_lcr": report.bound_lcr,
        "bound_qcr": report.bound_qcr,
        "impr": report.impr,
        "tau_sdp_l": report.tau_sdp_l,
        "tau_sdp_a": report.tau_sdp_a,
    }


def _print_json(doc):
    print(json.dumps(doc, indent=2, default=float))


# --- commands ---

def cmd_generate(args) -> int:
    try:
        spec = GenSpec(family=args.family, n=args.n, K=args.k, dominance=args.dominance,
                       sections=args.sections, seed=args.seed)
        inst = generate(spec)
    except IndivisibleSections as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as e:
        print(f"error: invalid generator flags: {e.errors()[0]['msg']}", file=sys.stderr)
        return EXIT_USAGE

    out = args.output or f"{spec.family.value}_n{spec.n}_s{spec.seed}.json"
    path = write_instance(inst, out)
    problems = validate(inst)
    print(str(path))
    print("valid" if not problems else "; ".join(problems))
    return EXIT_OK


def cmd_bound(args) -> int:
    inst = _load(args.instance)
    manager = make_settings(args)
    report = bound_compare(inst, manager.conic_settings(), manager.qp_settings(), opt=args.opt,
                           rho_method=manager.get_setting("rho_method"), qcr=args.qcr or None)
    _print_json(report.model_dump())
    if args.output:
        results = ResultsManager()
        results.add(RunRecord(instance=Path(args.instance).stem, reform="bound",
                              rho_method=manager.get_setting("rho_method"),
                              time_sdp_l=report.timings.get("sdp_l"), time_socp=report.timings.get("socp"),
                              error="; ".join(f"{k}: {v}" for k, v in sorted(report.failures.items())) or None,
                              **_metadata_fields(inst), **_report_fields(report)))
        results.write_csv(args.output)
    return EXIT_OK


def cmd_solve(args) -> int:
    inst = _load(args.instance)
    manager = make_settings(args)
    point, value, stats, timings = run_reform(inst, args.reform, manager)
    doc = {
        "reform": args.reform,
        "objective": value if point is not None else None,
        "objective_with_constant": value + inst.constant if point is not None else None,
        "x": point.x.tolist() if point is not None else None,
        "y": point.y.tolist() if point is not None else None,
        "stats": stats.model_dump(mode="json"),
        "timings": timings,
    }
    _print_json(doc)
    if args.output:
        Path(args.output).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        logger.info(f"solution written to {args.output}")
    return STATUS_EXIT[stats.status]


def _bench_instance(path: Path, reforms: List[str], manager: SettingsManager, cache: ParameterCache,
                    qcr: bool) -> List[RunRecord]:
    name = path.stem
    rho_method = manager.get_setting("rho_method")
    try:
        inst = _load(path)
    except (InstanceIoError, ParseError, DimensionMismatch) as e:
        logger.error(f"{name}: unreadable instance: {e}")
        return [RunRecord(instance=name, reform=r, status="InputError", error=str(e)) for r in reforms]

    records, opt = [], None
    for reform in reforms:
        record = RunRecord(instance=name, reform=reform, rho_method=rho_method, **_metadata_fields(inst))
        try:
            point, value, stats, timings = run_reform(inst, reform, manager, cache)
            record.status = stats.status.value
            record.nodes = stats.nodes_explored
            record.cuts = stats.cuts_added
            record.gap = stats.final_gap if np.isfinite(stats.final_gap) else None
            record.objective = value if point is not None else None
            for key, seconds in timings.items():
                setattr(record, key, seconds)
            if stats.status is SolveStatus.OPTIMAL and opt is None:
                opt = value
        except Exception as e:
            logger.error(f"{name}/{reform} failed: {type(e).__name__}: {e}")
            record.status = "Error"
            record.error = str(e)
        records.append(record)

    report = bound_compare(inst, manager.conic_settings(), manager.qp_settings(), opt=opt,
                           rho_method=rho_method, qcr=qcr or None, cache=cache)
    for record in records:
        for key, value in _report_fields(report).items():
            setattr(record, key, value)
    return records


def cmd_bench(args) -> int:
    directory = Path(args.directory)
    if not directory.is_dir():
        print(f"error: {directory} is not a directory", file=sys.stderr)
        return EXIT_INPUT
    reforms = [r.strip() for r in args.reforms.split(",") if r.strip()]
    unknown = [r for r in reforms if r not in REFORMS]
    if unknown:
        print(f"error: unknown reformulation(s) {', '.join(unknown)}", file=sys.stderr)
        return EXIT_USAGE

    manager = make_settings(args)
    cache = ParameterCache()
    results = ResultsManager()
    files = sorted(directory.glob("*.json"))
    logger.info(f"benchmarking {len(files)} instances x {len(reforms)} reformulations")
    for path in files:
        for record in _bench_instance(path, reforms, manager, cache, args.qcr):
            results.add(record)

    out = args.output or "results.csv"
    results.write_csv(out, include_timings=not args.deterministic)
    if args.averages:
        results.write_averages(args.averages)
    logger.info(f"parameter cache: {cache.hits} hits, {cache.misses} misses")
    print(out)
    return EXIT_OK


# --- argument parsing ---

def _solver_flags(p: argparse.ArgumentParser):
    p.add_argument("--settings", help="JSON settings file")
    p.add_argument("--rho", choices=RHO_METHODS, help="perspective parameter method")
    p.add_argument("--conic-eps", type=float)
    p.add_argument("--conic-max-iter", type=int)


def _bnb_flags(p: argparse.ArgumentParser):
    p.add_argument("--gap", type=float, help="relative optimality gap (default 1e-4)")
    p.add_argument("--time-limit", type=float)
    p.add_argument("--node-limit", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scqp", description="Semi-continuous convex QP reformulations and solvers")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a random instance")
    gen.add_argument("family", choices=["mv", "ssp"])
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--k", type=int)
    gen.add_argument("--dominance", choices=["minus", "zero", "plus"], default="zero")
    gen.add_argument("--sections", type=int)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("-o", "--output")
    gen.set_defaults(func=cmd_generate)

    bound = sub.add_parser("bound", help="compare root bounds of every reformulation")
    bound.add_argument("instance")
    bound.add_argument("--qcr", action="store_true", help="also solve SDP_a and report the QCR bound")
    bound.add_argument("--opt", type=float, help="known optimum, enables the improvement ratio")
    bound.add_argument("-o", "--output", help="CSV file")
    _solver_flags(bound)
    bound.set_defaults(func=cmd_bound)

    solve = sub.add_parser("solve", help="branch-and-bound with a chosen reformulation")
    solve.add_argument("instance")
    solve.add_argument("--reform", choices=REFORMS, default="lcr")
    solve.add_argument("-o", "--output", help="solution JSON file")
    _solver_flags(solve)
    _bnb_flags(solve)
    solve.set_defaults(func=cmd_solve)

    bench = sub.add_parser("bench", help="solve every instance of a directory, write CSV")
    bench.add_argument("directory")
    bench.add_argument("--reforms", default="plain,lcr,pc")
    bench.add_argument("--qcr", action="store_true")
    bench.add_argument("--averages", help="CSV file for per-subset averages")
    bench.add_argument("-o", "--output", help="CSV file (default results.csv)")
    _solver_flags(bench)
    _bnb_flags(bench)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InstanceIoError, ParseError, DimensionMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except InfeasibleProblem as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverError as e:
        logger.error(f"solver failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
