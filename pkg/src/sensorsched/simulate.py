"""Policy simulation on the deterministic covariance dynamics.

Covariances of Kalman-Bucy filters do not depend on measured values, so a
policy's cost is computed exactly (up to quadrature) by integrating the
Riccati differential equations under its sensor assignments.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .birkhoff import SwitchingSchedule, schedule_from_assignment
from .bound import BoundResult, solve_bound
from .errors import IntegrationBlowupError, SchedulingError, StructuralError
from .model import Mode, SchedulingProblem, composite_information
from .riccati import CovarianceTrajectory, PiecewiseConstantInformation, integrate_batch, integrate_rde, rk4_steps
from .whittle import sites_from_problem, whittle_policy_step

log = logging.getLogger(__name__)


@dataclass
class PolicyResult:
    policy: str
    avg_cost: float
    trajectories: list
    time_fractions: np.ndarray
    horizon: float
    transient_cut: float
    window: tuple
    full_average: float
    epsilon: float | None = None
    dt: float | None = None

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "avg_cost": self.avg_cost,
            "full_horizon_average": self.full_average,
            "time_fractions": self.time_fractions.tolist(),
            "horizon": self.horizon,
            "transient_cut": self.transient_cut,
            "window": list(self.window),
            "epsilon": self.epsilon,
            "dt": self.dt,
        }


def _groups(problem: SchedulingProblem) -> dict:
    """Systems grouped by state dimension, for batched integration."""
    out: dict = {}
    for i, s in enumerate(problem.systems):
        out.setdefault(s.n, []).append(i)
    return out


def _window_average(times, values, t0, t1) -> float:
    """Trapezoidal average of ``values`` over ``[t0, t1]`` (both on the grid)."""
    lo = int(np.searchsorted(times, t0 - 1e-12 * max(1.0, t0)))
    hi = int(np.searchsorted(times, t1 + 1e-12 * max(1.0, t1), side="right"))
    t, v = times[lo:hi], values[lo:hi]
    if len(t) < 2:
        return float(v[0]) if len(v) else math.nan
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(t)) / (t[-1] - t[0]))


def _tracking_cost(problem, trajectories, t0, t1) -> float:
    return sum(
        _window_average(tr.times, tr.trace_weighted(problem.systems[tr.system_index].T_weight), t0, t1)
        for tr in trajectories
    )


# --------------------------------------------------------------------------
# open-loop periodic switching


def _schedule_pieces(schedule: SwitchingSchedule, horizon: float):
    """``(start, end, atom)`` pieces of the periodic schedule on ``[0, horizon]``."""
    starts = schedule.switch_times
    ends = np.append(starts[1:], schedule.epsilon)
    eps = schedule.epsilon
    n_cycles = math.ceil(horizon / eps - 1e-9)
    for c in range(n_cycles):
        base = c * eps
        for k in range(len(starts)):
            lo = base + starts[k]
            hi = min(base + ends[k], horizon)
            if hi - lo > 1e-14 * max(1.0, hi):
                yield lo, hi, k


def run_switching(problem: SchedulingProblem, schedule: SwitchingSchedule, horizon: float = 50.0,
                  transient_cut: float | None = None, step_hint: float | None = None) -> PolicyResult:
    """Simulate the open-loop periodic schedule.

    Averages are taken over whole cycles inside ``[transient_cut, horizon]``;
    the measurement-cost term is accumulated exactly per piece.
    """
    eps = schedule.epsilon
    if horizon < 10 * eps:
        raise ValueError(f"horizon {horizon} must be at least 10 cycles of length {eps}")
    if transient_cut is None:
        transient_cut = horizon / 2
    if not 0 <= transient_cut < horizon:
        raise ValueError("transient_cut must lie in [0, horizon)")
    if (schedule.n_systems, schedule.n_sensors) != (problem.N, problem.M):
        raise StructuralError("schedule shape does not match the problem")
    if step_hint is None:
        step_hint = eps / 40.0
    t0 = math.ceil(transient_cut / eps - 1e-9) * eps
    t1 = math.floor(horizon / eps + 1e-9) * eps
    if t1 <= t0:
        t0 = math.floor(transient_cut / eps) * eps
    pieces = list(_schedule_pieces(schedule, horizon))
    sensors = [schedule.sensor_of(i) for i in range(problem.N)]

    realized = np.zeros((problem.N, problem.M))
    for lo, hi, k in pieces:
        overlap = min(hi, t1) - max(lo, t0)
        if overlap > 0:
            for i in range(problem.N):
                if sensors[i][k] >= 0:
                    realized[i, sensors[i][k]] += overlap
    realized /= t1 - t0

    trajectories = [None] * problem.N
    for n, idx in _groups(problem).items():
        A = np.stack([problem.systems[i].A for i in idx])
        W = np.stack([problem.systems[i].W for i in idx])
        X0 = np.stack([problem.systems[i].Sigma0 for i in idx])
        zero = np.zeros((n, n))
        atom_info = [
            np.stack([problem.information(i, sensors[i][k]) if sensors[i][k] >= 0 else zero for i in idx])
            for k in range(len(schedule.atoms))
        ]
        batch_pieces = ((lo, hi, atom_info[k]) for lo, hi, k in pieces)
        try:
            times, states = integrate_batch(A, W, X0, batch_pieces, step_hint)
        except IntegrationBlowupError as exc:
            raise IntegrationBlowupError(f"switching policy (epsilon={eps}): {exc}", exc.time) from exc
        for b, i in enumerate(idx):
            trajectories[i] = CovarianceTrajectory(times, states[:, b], i, schedule.active_sensor(i, times))

    kappa = float(np.sum(problem.kappa * realized))
    avg = _tracking_cost(problem, trajectories, t0, t1) + kappa
    full = _tracking_cost(problem, trajectories, 0.0, t1) + float(np.sum(problem.kappa * schedule.time_fractions()))
    return PolicyResult("switching", avg, trajectories, realized, horizon, transient_cut, (t0, t1), full, epsilon=eps)


# --------------------------------------------------------------------------
# feedback policies


def _run_feedback(problem: SchedulingProblem, name: str, choose: Callable, horizon: float, dt: float,
                  transient_cut: float | None) -> PolicyResult:
    """Review every ``dt``: ``choose(sigmas)`` returns ``(system, sensor)`` pairs
    held fixed over the next RK4 step."""
    if not dt > 0 or not horizon > dt:
        raise ValueError("need 0 < dt < horizon")
    if transient_cut is None:
        transient_cut = horizon / 2
    if not 0 <= transient_cut < horizon:
        raise ValueError("transient_cut must lie in [0, horizon)")
    nsteps = int(round(horizon / dt))
    times = dt * np.arange(nsteps + 1)
    N, M = problem.N, problem.M
    groups = _groups(problem)
    slot = {i: (n, b) for n, idx in groups.items() for b, i in enumerate(idx)}
    A = {n: np.stack([problem.systems[i].A for i in idx]) for n, idx in groups.items()}
    W = {n: np.stack([problem.systems[i].W for i in idx]) for n, idx in groups.items()}
    X = {n: np.stack([problem.systems[i].Sigma0 for i in idx]) for n, idx in groups.items()}
    record = {n: np.empty((nsteps + 1,) + X[n].shape) for n in groups}
    for n in groups:
        record[n][0] = X[n]
    active = np.full((nsteps + 1, N), -1, dtype=int)
    k0 = int(np.searchsorted(times, transient_cut - 1e-9 * dt))
    realized = np.zeros((N, M))
    kappa_total = 0.0
    kappa = problem.kappa

    for k in range(nsteps):
        sigmas = [X[slot[i][0]][slot[i][1]] for i in range(N)]
        pairs = choose(sigmas)
        S = {n: np.zeros_like(X[n]) for n in groups}
        for i, j in pairs:
            n, b = slot[i]
            S[n][b] = problem.information(i, j)
            active[k, i] = j
            if k >= k0:
                realized[i, j] += dt
                kappa_total += kappa[i, j] * dt
        for n in groups:
            X[n] = rk4_steps(A[n], W[n], S[n], X[n], dt, 1)
            record[n][k + 1] = X[n]
        if not all(np.all(np.isfinite(X[n])) for n in groups):
            raise IntegrationBlowupError(f"{name} policy: non-finite covariance at t={times[k + 1]:.6g}", times[k + 1])
    active[-1] = active[-2]
    trajectories = [
        CovarianceTrajectory(times, record[slot[i][0]][:, slot[i][1]], i, active[:, i]) for i in range(N)
    ]
    t0, t1 = times[k0], times[-1]
    span = t1 - t0
    realized /= span
    avg = _tracking_cost(problem, trajectories, t0, t1) + kappa_total / span
    full_kappa = sum(kappa[i, active[k, i]] for k in range(nsteps) for i in range(N) if active[k, i] >= 0) * dt
    full = _tracking_cost(problem, trajectories, 0.0, t1) + full_kappa / t1
    return PolicyResult(name, avg, trajectories, realized, horizon, transient_cut, (t0, t1), full, dt=dt)


def run_whittle(problem: SchedulingProblem, M: int | None = None, horizon: float = 50.0, dt: float = 1e-3,
                transient_cut: float | None = None) -> PolicyResult:
    """Measure the ``M`` scalar sites with the highest Whittle index at each review.

    With at-most-one sensors, sites with a negative index are left unmeasured.
    """
    sites = sites_from_problem(problem)
    M = problem.M if M is None else M
    skip = all(m is Mode.AT_MOST_ONE for m in problem.sensor_mode)

    def choose(sigmas):
        chosen = whittle_policy_step(sites, [float(s[0, 0]) for s in sigmas], M, skip_negative=skip)
        return list(zip(chosen, range(len(chosen))))

    return _run_feedback(problem, "whittle", choose, horizon, dt, transient_cut)


def run_greedy(problem: SchedulingProblem, M: int | None = None, horizon: float = 50.0, dt: float = 1e-3,
               transient_cut: float | None = None) -> PolicyResult:
    """Measure the ``M`` systems with the largest ``Tr(T_i Sigma_i)`` (ties: lowest index).

    Chosen systems pick sensors in priority order, each taking the free sensor
    that reduces its weighted error fastest (``Tr(T S C^T V^-1 C S)``).
    """
    M = problem.M if M is None else M
    Ts = [s.T_weight for s in problem.systems]

    def choose(sigmas):
        scores = [float(np.sum(T * s)) for T, s in zip(Ts, sigmas)]
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:M]
        free = list(range(problem.M))
        pairs = []
        for i in order:
            if not free:
                break
            left = sigmas[i] @ Ts[i] @ sigmas[i]
            rates = [float(np.sum(left * problem.information(i, j))) for j in free]
            best = int(np.argmax(rates))
            pairs.append((i, free.pop(best)))
        return pairs

    return _run_feedback(problem, "greedy", choose, horizon, dt, transient_cut)


def averaged_rde_reference(problem: SchedulingProblem, p, horizon: float = 50.0,
                           step_hint: float = 0.01) -> list[CovarianceTrajectory]:
    """Trajectories of the RDE driven by the time-averaged information ``sum_j p_ij C^T V^-1 C``."""
    p = np.asarray(p, dtype=float)
    out = []
    for i, s in enumerate(problem.systems):
        info = PiecewiseConstantInformation.constant(composite_information(problem, i, p[i]))
        out.append(integrate_rde(s.A, s.W, info, s.Sigma0, (0.0, horizon), step_hint, system_index=i))
    return out


# --------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    z_star: float
    bound: BoundResult
    rows: list
    results: dict = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"{'policy':<22}{'avg_cost':>12}{'gap':>12}"]
        for row in self.rows:
            if row.get("error"):
                lines.append(f"{row['label']:<22}{'failed':>12}  {row['error']}")
            else:
                lines.append(f"{row['label']:<22}{row['avg_cost']:>12.5f}{row['gap']:>12.5f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"z_star": self.z_star, "bound": self.bound.to_dict(), "rows": self.rows}


def compare_policies(problem: SchedulingProblem, epsilon_list: Sequence[float] = (0.05,), horizon: float = 50.0,
                     transient_cut: float | None = None, dt: float | None = None, tol: float = 1e-6,
                     dominance_tol: float = 1e-3) -> ComparisonReport:
    """Bound, periodic switching for each epsilon, Whittle (scalar problems only) and greedy.

    Failures of individual policies are reported in their row instead of
    aborting the comparison.
    """
    bound = solve_bound(problem, tol=tol)
    z = bound.z_star
    if dt is None:
        dt = min(epsilon_list) / 10 if epsilon_list else 1e-3
    rows = [{"label": "bound", "policy": "bound", "avg_cost": z, "gap": 0.0,
             "time_fractions": bound.p_star.tolist()}]
    results = {}

    def attempt(label, run):
        try:
            res = run()
        except (SchedulingError, ValueError) as exc:
            log.warning("%s failed: %s", label, exc)
            rows.append({"label": label, "error": f"{type(exc).__name__}: {exc}"})
            return
        gap = res.avg_cost - z
        rows.append({
            "label": label,
            "policy": res.policy,
            "avg_cost": res.avg_cost,
            "gap": gap,
            "time_fractions": res.time_fractions.tolist(),
            "epsilon": res.epsilon,
            "dt": res.dt,
            "below_bound": bool(gap < -dominance_tol),
        })
        results[label] = res

    for eps in epsilon_list:
        attempt(
            f"switching eps={eps:g}",
            lambda eps=eps: run_switching(problem, schedule_from_assignment(bound.p_star, eps), horizon, transient_cut),
        )
    try:
        sites_from_problem(problem)
        scalar = True
    except StructuralError:
        scalar = False
    if scalar:
        attempt("whittle", lambda: run_whittle(problem, horizon=horizon, dt=dt, transient_cut=transient_cut))
    else:
        rows.append({"label": "whittle", "error": "skipped: needs scalar systems with identical sensors"})
    attempt("greedy", lambda: run_greedy(problem, horizon=horizon, dt=dt, transient_cut=transient_cut))
    return ComparisonReport(z, bound, rows, results)
