"""Command-line front end.

Exit codes: 0 on success, 1 when the problem file or flags are rejected
(unparsable input, failed assumption checks, bad numeric flags), 2 when a
solver or integrator fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .birkhoff import schedule_from_assignment
from .bound import dual_decomposition_solve, solve_bound
from .errors import SchedulingError, StructuralError
from .model import load_problem, validate_problem
from .riccati import write_trajectories_csv
from .simulate import compare_policies, run_greedy, run_switching, run_whittle
from .whittle import scalar_dual_bound, sites_from_problem, whittle_index

log = logging.getLogger("sensorsched")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    subcommand: str
    problem_path: str
    tol: float = 1e-6
    max_iters: int = 1000
    method: str = "fw"
    scalar: bool = False
    epsilon: tuple = (0.05,)
    dt: float | None = None
    horizon: float = 50.0
    transient_cut: float | None = None
    policy: str = "switching"
    points: int = 101
    sigma_max: float | None = None
    assignment: str | None = None
    out: str | None = None
    out_dir: str | None = None
    seed: int = 0

    def check(self):
        positive = {"tol": self.tol, "max_iters": self.max_iters, "horizon": self.horizon, "points": self.points}
        if self.dt is not None:
            positive["dt"] = self.dt
        if self.sigma_max is not None:
            positive["sigma_max"] = self.sigma_max
        for k, eps in enumerate(self.epsilon):
            positive[f"epsilon[{k}]"] = eps
        for name, value in positive.items():
            if not value > 0:
                raise UsageError(f"--{name.replace('_', '-')} must be positive, got {value}")
        if self.transient_cut is not None and not 0 <= self.transient_cut < self.horizon:
            raise UsageError("--transient-cut must lie in [0, horizon)")
        if self.subcommand in ("simulate", "compare") and self.policy == "switching":
            for eps in self.epsilon:
                if not eps < self.horizon / 10:
                    raise UsageError(f"--epsilon {eps} must be below horizon/10 = {self.horizon / 10}")


def _metadata(config: RunConfig, started: float) -> dict:
    return {
        "tool": "sensorsched",
        "version": __version__,
        "config": asdict(config),
        "wall_time_s": round(time.perf_counter() - started, 6),
    }


def _emit(payload: dict, out: str | None):
    text = json.dumps(payload, indent=2, default=_json_default)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# --------------------------------------------------------------------------
# subcommands


def _cmd_validate(problem, config, started):
    report = validate_problem(problem)
    print(report.render())
    return EXIT_OK if report.ok else EXIT_INPUT


def _require_valid(problem):
    report = validate_problem(problem)
    if not report.ok:
        print(report.render(), file=sys.stderr)
        return False
    return True


def _cmd_bound(problem, config, started):
    if config.method == "dual":
        result = dual_decomposition_solve(problem, tol=config.tol, max_iters=config.max_iters)
    else:
        result = solve_bound(problem, tol=config.tol, max_iters=config.max_iters)
    payload = result.to_dict()
    if config.scalar:
        sites = sites_from_problem(problem)
        dual = scalar_dual_bound(sites, problem.M, problem.sensor_mode[0])
        payload["scalar_dual"] = {
            "lambda_star": dual.lambda_star,
            "gamma_star": dual.gamma_star,
            "site_gammas": list(dual.site_gammas),
            "fractions": list(dual.fractions),
        }
    payload["metadata"] = _metadata(config, started)
    _emit(payload, config.out)
    return EXIT_OK


def _cmd_indices(problem, config, started):
    sites = sites_from_problem(problem)
    top = config.sigma_max
    if top is None:
        finite = [s.x_e for s in sites if np.isfinite(s.x_e)] + [s.x2 for s in sites if not s.degenerate]
        top = 2.0 * max(finite + [1.0])
    grid = np.linspace(0.0, top, config.points)
    rows = [(i, float(x), float(whittle_index(site, x))) for i, site in enumerate(sites) for x in grid]
    target = open(config.out, "w", newline="", encoding="utf-8") if config.out else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(["site", "Sigma", "lambda"])
        for i, x, lam in rows:
            writer.writerow([i, repr(x), repr(lam)])
    finally:
        if config.out:
            target.close()
    if config.out:
        meta_path = Path(config.out).with_suffix(".meta.json")
        _emit({"metadata": _metadata(config, started)}, str(meta_path))
    return EXIT_OK


def _load_assignment(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data.get("p_star", data.get("p"))
    return np.atleast_2d(np.asarray(data, dtype=float))


def _cmd_decompose(problem, config, started):
    if config.assignment:
        p = _load_assignment(config.assignment)
        if p.shape != (problem.N, problem.M):
            raise StructuralError(f"assignment has shape {p.shape}, expected {(problem.N, problem.M)}")
    else:
        p = solve_bound(problem, tol=config.tol, max_iters=config.max_iters).p_star
    schedule = schedule_from_assignment(p, config.epsilon[0])
    payload = schedule.to_dict()
    payload["assignment"] = p.tolist()
    payload["metadata"] = _metadata(config, started)
    _emit(payload, config.out)
    return EXIT_OK


def _cmd_simulate(problem, config, started):
    payload = {}
    if config.policy == "switching":
        bound = solve_bound(problem, tol=config.tol, max_iters=config.max_iters)
        schedule = schedule_from_assignment(bound.p_star, config.epsilon[0])
        result = run_switching(problem, schedule, config.horizon, config.transient_cut)
        payload["z_star"] = bound.z_star
        payload["schedule"] = schedule.to_dict()
    else:
        run = run_whittle if config.policy == "whittle" else run_greedy
        result = run(problem, horizon=config.horizon, dt=config.dt or 1e-3, transient_cut=config.transient_cut)
    payload.update(result.summary())
    if config.out:
        write_trajectories_csv(config.out, result.trajectories)
        payload["trajectories_csv"] = config.out
    payload["metadata"] = _metadata(config, started)
    _emit(payload, None)
    return EXIT_OK


def _cmd_compare(problem, config, started):
    report = compare_policies(
        problem,
        epsilon_list=config.epsilon,
        horizon=config.horizon,
        transient_cut=config.transient_cut,
        dt=config.dt,
        tol=config.tol,
    )
    payload = report.to_dict()
    if config.out_dir:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {}
        for label, res in report.results.items():
            name = label.replace(" ", "_").replace("=", "")
            path = out_dir / f"{name}.csv"
            write_trajectories_csv(path, res.trajectories)
            files[label] = str(path)
        payload["trajectory_files"] = files
    payload["metadata"] = _metadata(config, started)
    print(report.table(), file=sys.stderr)
    _emit(payload, config.out)
    return EXIT_OK


COMMANDS = {
    "validate": _cmd_validate,
    "bound": _cmd_bound,
    "indices": _cmd_indices,
    "decompose": _cmd_decompose,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sensorsched", description="Sensor scheduling bounds and policies for Kalman-Bucy filters")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("problem_path", help="problem file (JSON)")
        p.add_argument("--seed", type=int, default=0, help="recorded in the metadata; runs are deterministic")
        return p

    add("validate", "check the modelling assumptions")

    p = add("bound", "compute the performance lower bound")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--method", choices=["fw", "dual"], default="fw")
    p.add_argument("--scalar", action="store_true", help="also report the closed-form scalar dual")
    p.add_argument("--out", help="write JSON here instead of stdout")

    p = add("indices", "tabulate Whittle indices of scalar sites (CSV)")
    p.add_argument("--points", type=int, default=101)
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--out", help="CSV path (stdout by default)")

    p = add("decompose", "periodic switching schedule from an assignment")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--assignment", help="JSON matrix (or a bound result); solves the bound when omitted")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--out")

    p = add("simulate", "simulate one policy")
    p.add_argument("--policy", choices=["switching", "whittle", "greedy"], default="switching")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=float, default=50.0)
    p.add_argument("--transient-cut", type=float)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--out", help="trajectory CSV")

    p = add("compare", "bound versus switching, Whittle and greedy policies")
    p.add_argument("--epsilon", type=float, nargs="+", default=[0.05])
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=float, default=50.0)
    p.add_argument("--transient-cut", type=float)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", help="JSON report path (stdout by default)")
    p.add_argument("--out-dir", help="directory for per-policy trajectory CSVs")
    return parser


def _config_from_args(args) -> RunConfig:
    values = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__ and v is not None}
    eps = values.get("epsilon")
    if eps is not None:
        values["epsilon"] = tuple(eps) if isinstance(eps, list) else (eps,)
    return RunConfig(**values)


def main(argv=None) -> int:
    started = time.perf_counter()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _config_from_args(args)
        config.check()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        problem = load_problem(config.problem_path)
    except (OSError, StructuralError) as exc:
        print(f"error: {config.problem_path}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if config.subcommand != "validate" and not _require_valid(problem):
        return EXIT_INPUT
    try:
        return COMMANDS[config.subcommand](problem, config, started)
    except StructuralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SchedulingError as exc:
        print(f"solver error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
