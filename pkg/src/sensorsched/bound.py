"""Convex performance bound over relaxed assignments.

The bound is ``min_p sum_i Tr(T_i S_i(p)) + sum_ij kappa_ij p_ij`` where
``S_i(p)`` is the stabilizing solution of the averaged filter ARE with
information ``sum_j p_ij C_ij^T V_ij^{-1} C_ij``.  This is the reduced form
of the LMI program: at the optimum the Riccati inequality is tight at its
minimal solution, so optimizing over ``p`` alone gives the same value.

Two solvers are provided: away-step Frank-Wolfe over the assignment polytope
(linear minimization by min-cost assignment), and dual decomposition over the
sensor coupling constraints with per-system Frank-Wolfe subproblems.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog, minimize

from .birkhoff import birkhoff_decompose, pad_square
from .errors import (
    GradientUnavailableError,
    InfeasibleAssignmentError,
    NoFeasibleStartError,
    SchedulingError,
    StructuralError,
)
from .model import Mode, SchedulingProblem, composite_information, detectability_with_weights
from .riccati import solve_care, solve_lyapunov

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9


class Evaluation(NamedTuple):
    value: float
    sigmas: list
    reason: str = ""


@dataclass
class BoundResult:
    z_star: float
    p_star: np.ndarray
    sigma_star: list
    certificate: float
    iterations: int
    method: str = "fw"
    history: list = field(default_factory=list)
    lambda_star: np.ndarray | None = None
    primal_value: float | None = None

    def to_dict(self) -> dict:
        out = {
            "z_star": self.z_star,
            "p_star": self.p_star.tolist(),
            "gap": self.certificate,
            "iterations": self.iterations,
            "method": self.method,
            "per_system_trace": [float(np.trace(s)) for s in self.sigma_star],
            "history": self.history,
        }
        if self.lambda_star is not None:
            out["lambda_star"] = np.asarray(self.lambda_star).tolist()
            out["primal_value"] = self.primal_value
        return out


# --------------------------------------------------------------------------
# feasibility


def is_feasible(problem: SchedulingProblem, p, tol: float = FEAS_TOL) -> bool:
    p = np.asarray(p, dtype=float)
    if p.shape != (problem.N, problem.M) or np.any(p < -tol) or np.any(p > 1 + tol):
        return False
    for sums, modes in ((p.sum(axis=1), problem.system_mode), (p.sum(axis=0), problem.sensor_mode)):
        for s, mode in zip(sums, modes):
            if s > 1 + tol or (mode is Mode.EXACTLY_ONE and s < 1 - tol):
                return False
    return True


def _require_feasible(problem, p):
    p = np.asarray(p, dtype=float)
    if p.shape != (problem.N, problem.M):
        raise StructuralError(f"assignment must have shape {(problem.N, problem.M)}, got {p.shape}")
    if not is_feasible(problem, p):
        raise StructuralError("assignment violates the row/column constraints")
    return p


# --------------------------------------------------------------------------
# objective and gradient


def _system_value(problem, i, weights):
    system = problem.systems[i]
    S = composite_information(problem, i, weights)
    try:
        sigma = solve_care(system.A, S, system.W)
    except SchedulingError as exc:
        return math.inf, None, S, f"system {i}: {exc}"
    value = float(np.trace(system.T_weight @ sigma))
    value += float(np.dot([link.kappa for link in problem.links[i]], weights))
    return value, sigma, S, ""


def evaluate_objective(problem: SchedulingProblem, p, check: bool = True) -> Evaluation:
    """Bound objective at ``p`` and the per-system ARE solutions.

    Returns ``+inf`` (with the reason) when some system loses detectability.
    """
    p = _require_feasible(problem, p) if check else np.asarray(p, dtype=float)
    total = 0.0
    sigmas = []
    for i in range(problem.N):
        value, sigma, _, reason = _system_value(problem, i, p[i])
        if not math.isfinite(value):
            return Evaluation(math.inf, [], reason)
        total += value
        sigmas.append(sigma)
    return Evaluation(total, sigmas, "")


def _system_gradient(problem, i, sigma, S):
    system = problem.systems[i]
    closed = system.A - sigma @ S
    if np.max(np.linalg.eigvals(closed).real) >= 0:
        raise GradientUnavailableError(f"system {i}: closed loop is not Hurwitz")
    adj = solve_lyapunov(closed.T, system.T_weight)
    left = sigma @ adj @ sigma
    return np.array(
        [link.kappa - float(np.sum(left * problem.information(i, j))) for j, link in enumerate(problem.links[i])]
    )


def objective_gradient(problem: SchedulingProblem, p, check: bool = True) -> np.ndarray:
    """Partial derivatives of the bound objective by adjoint differentiation of the ARE.

    ``d/dp_ij = kappa_ij - Tr(L_i S_i C^T V^-1 C S_i)`` with ``L_i`` solving
    ``(A - S_i Info_i)^T L + L (A - S_i Info_i) + T_i = 0``.
    """
    p = _require_feasible(problem, p) if check else np.asarray(p, dtype=float)
    grad = np.empty((problem.N, problem.M))
    for i in range(problem.N):
        value, sigma, S, reason = _system_value(problem, i, p[i])
        if sigma is None:
            raise GradientUnavailableError(reason)
        grad[i] = _system_gradient(problem, i, sigma, S)
    return grad


def _value_and_grad(problem, p):
    total = 0.0
    grad = np.empty((problem.N, problem.M))
    sigmas = []
    for i in range(problem.N):
        value, sigma, S, _ = _system_value(problem, i, p[i])
        if sigma is None:
            return math.inf, None, None
        total += value
        sigmas.append(sigma)
        try:
            grad[i] = _system_gradient(problem, i, sigma, S)
        except GradientUnavailableError:
            return math.inf, None, None
    return total, grad, sigmas


# --------------------------------------------------------------------------
# linear minimization over the assignment polytope


def assignment_lmo(gradient, sensor_mode, system_mode) -> np.ndarray:
    """Vertex of the assignment polytope minimizing <gradient, P>.

    Solved as a min-cost perfect matching on a square matrix padded with one
    dummy sensor per system and one dummy system per sensor; dummy pairings
    are forbidden for exactly-one rows/columns.
    """
    G = np.atleast_2d(np.asarray(gradient, dtype=float))
    N, M = G.shape
    sensor_mode = [Mode.parse(m) for m in sensor_mode]
    system_mode = [Mode.parse(m) for m in system_mode]
    size = N + M
    cost = np.full((size, size), np.inf)
    cost[:N, :M] = G
    for i in range(N):
        if system_mode[i] is Mode.AT_MOST_ONE:
            cost[i, M + i] = 0.0
    for j in range(M):
        if sensor_mode[j] is Mode.AT_MOST_ONE:
            cost[N + j, j] = 0.0
    cost[N:, M:] = 0.0
    try:
        rows, cols = linear_sum_assignment(cost)
    except ValueError as exc:
        raise InfeasibleAssignmentError("exactly-one constraints cannot be met simultaneously") from exc
    if not np.all(np.isfinite(cost[rows, cols])):
        raise InfeasibleAssignmentError("exactly-one constraints cannot be met simultaneously")
    P = np.zeros((N, M))
    for r, c in zip(rows, cols):
        if r < N and c < M:
            P[r, c] = 1.0
    return P


def _row_lmo(g, mode):
    """Vertex of {q >= 0, sum q <= 1 (or == 1)} minimizing <g, q>."""
    q = np.zeros_like(g)
    j = int(np.argmin(g))
    if mode is Mode.EXACTLY_ONE or g[j] < 0:
        q[j] = 1.0
    return q


# --------------------------------------------------------------------------
# away-step Frank-Wolfe


def _line_search(phi_grad: Callable, gmax: float, d0: float, rel: float = 1e-6,
                 tol: float = 1e-12, max_evals: int = 80) -> float:
    """Minimize a convex function on [0, gmax] from its directional derivative.

    ``phi_grad(g)`` returns the derivative at ``g`` (``inf`` where the
    function is infinite); ``d0 < 0`` is the derivative at 0.  Stops once the
    derivative has shrunk to ``rel * |d0|``.
    """
    target = rel * abs(d0)
    hi = gmax
    d_hi = phi_grad(hi)
    if d_hi <= 0:
        return hi
    lo, d_lo = 0.0, None
    side = 0
    for _ in range(max_evals):
        if hi - lo <= tol * max(1.0, hi):
            break
        if d_lo is None or not math.isfinite(d_hi):
            g = 0.5 * (lo + hi)
        else:
            # Illinois variant of regula falsi on the derivative
            g = hi - d_hi * (hi - lo) / (d_hi - d_lo)
            if not lo < g < hi:
                g = 0.5 * (lo + hi)
        d = phi_grad(g)
        if abs(d) <= target:
            return g
        if d < 0:
            lo, d_lo = g, d
            if side == -1 and d_hi is not None and math.isfinite(d_hi):
                d_hi *= 0.5
            side = -1
        else:
            hi, d_hi = g, d
            if side == 1 and d_lo is not None:
                d_lo *= 0.5
            side = 1
    return lo


def _correct_weights(value_grad, atoms, f):
    """Re-optimize the weights of the active vertices over the simplex.

    Returns the improved ``(atoms, x, value, grad, extra)`` or ``None`` when
    no improvement was found.
    """
    keys = list(atoms)
    if len(keys) < 2:
        return None
    V = np.stack([atoms[k][1] for k in keys])
    w0 = np.array([atoms[k][0] for k in keys])
    memo = {}

    def evaluate(w):
        key = w.tobytes()
        if key not in memo:
            memo[key] = value_grad(np.tensordot(w, V, axes=1))
        return memo[key]

    def fun(w):
        val = evaluate(w)[0]
        return val if math.isfinite(val) else 1e300

    def jac(w):
        res = evaluate(w)
        if res[1] is None:
            return np.zeros_like(w)
        return np.array([float(np.sum(res[1] * v)) for v in V])

    out = minimize(
        fun, w0, jac=jac, method="SLSQP", bounds=[(0.0, 1.0)] * len(keys),
        constraints=[{"type": "eq", "fun": lambda w: np.sum(w) - 1.0, "jac": lambda w: np.ones_like(w)}],
        options={"maxiter": 50, "ftol": 1e-15},
    )
    w = np.clip(out.x, 0.0, None)
    w /= w.sum()
    res = value_grad(np.tensordot(w, V, axes=1))
    if not math.isfinite(res[0]) or res[0] >= f:
        return None
    new = {k: (float(wk), atoms[k][1]) for k, wk in zip(keys, w) if wk > 1e-15}
    total = sum(wk for wk, _ in new.values())
    new = {k: (wk / total, v) for k, (wk, v) in new.items()}
    x = sum(wk * v for wk, v in new.values())
    f_new, g_new, extra = value_grad(x)
    if not math.isfinite(f_new) or f_new >= f:
        return None
    return new, x, f_new, g_new, extra


def _away_step_fw(value_grad, lmo, atoms, tol, max_iters, history=None, pairwise=False,
                  correct_every: int | None = None):
    """Away-step (or pairwise) Frank-Wolfe on a polytope given by its LMO.

    ``atoms`` maps a hashable key to ``(weight, vertex)``; the iterate is the
    weighted sum.  Pairwise steps move weight straight from the away vertex to
    the Frank-Wolfe vertex, which copes better with objectives that are flat
    along some face.  With ``correct_every`` the weights of the active
    vertices are re-optimized every that many iterations (fully corrective
    steps), which removes the zig-zagging of plain Frank-Wolfe near an
    optimum inside a face.  Returns ``(x, value, grad, extra, gap, iterations,
    atoms)``.
    """
    atoms = dict(atoms)
    x = sum(w * v for w, v in atoms.values())
    f, g, extra = value_grad(x)
    if not math.isfinite(f):
        raise NoFeasibleStartError("starting point has infinite objective")
    gap = math.inf
    it = 0
    stalls = 0
    for it in range(1, max_iters + 1):
        s = lmo(g)
        gap = float(np.sum(g * (x - s)))
        if history is not None:
            history.append({"iteration": it - 1, "value": f, "gap": gap})
        if gap <= tol:
            break
        s_key = s.tobytes()
        keys = list(atoms)
        scores = [float(np.sum(g * atoms[k][1])) for k in keys]
        a_key = keys[int(np.argmax(scores))]
        w_a, v_a = atoms[a_key]
        away_gap = float(np.sum(g * (v_a - x)))
        if pairwise and a_key != s_key:
            kind, d, gmax = "pair", s - v_a, w_a
        elif gap >= away_gap or w_a >= 1.0 - 1e-15:
            kind, d, gmax = "toward", s - x, 1.0
        else:
            kind, d, gmax = "away", x - v_a, w_a / (1.0 - w_a)

        cache = {}

        def phi_grad(gam):
            res = value_grad(x + gam * d)
            cache[gam] = res
            if not math.isfinite(res[0]):
                return math.inf
            return float(np.sum(res[1] * d))

        gam = _line_search(phi_grad, gmax, float(np.sum(g * d)))
        if gam <= 0.0:
            stalls += 1
            if stalls >= 3:
                break
            continue
        if kind == "toward":
            new = {k: ((1.0 - gam) * w, v) for k, (w, v) in atoms.items()}
            new[s_key] = (new.get(s_key, (0.0, s))[0] + gam, s)
            if gam >= 1.0:
                new = {s_key: (1.0, s)}
        elif kind == "away":
            new = {k: ((1.0 + gam) * w, v) for k, (w, v) in atoms.items()}
            new[a_key] = (new[a_key][0] - gam, v_a)
            if gam >= gmax:
                del new[a_key]
        else:
            new = dict(atoms)
            new[s_key] = (new.get(s_key, (0.0, s))[0] + gam, s)
            new[a_key] = (w_a - gam, v_a)
            if gam >= gmax:
                del new[a_key]
        new = {k: (w, v) for k, (w, v) in new.items() if w > 1e-15}
        total = sum(w for w, _ in new.values())
        new = {k: (w / total, v) for k, (w, v) in new.items()}
        x_new = sum(w * v for w, v in new.values())
        res = cache.get(gam)
        f_new, g_new, extra_new = res if res is not None else value_grad(x_new)
        if not math.isfinite(f_new) or f_new > f + 1e-14 * max(1.0, abs(f)):
            stalls += 1
            if stalls >= 3:
                break
            continue
        stalls = 0
        atoms = new
        x, f, g, extra = x_new, f_new, g_new, extra_new
        if correct_every and it % correct_every == 0:
            corrected = _correct_weights(value_grad, atoms, f)
            if corrected is not None:
                atoms, x, f, g, extra = corrected
    return x, f, g, extra, gap, it, atoms


# --------------------------------------------------------------------------
# starting point


def _constraint_rows(problem):
    """Inequality and equality rows for row/column sums over flattened p."""
    N, M = problem.N, problem.M
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    for i in range(N):
        row = np.zeros(N * M)
        row[i * M:(i + 1) * M] = 1.0
        (A_eq if problem.system_mode[i] is Mode.EXACTLY_ONE else A_ub).append(row)
        (b_eq if problem.system_mode[i] is Mode.EXACTLY_ONE else b_ub).append(1.0)
    for j in range(M):
        col = np.zeros(N * M)
        col[j::M] = 1.0
        (A_eq if problem.sensor_mode[j] is Mode.EXACTLY_ONE else A_ub).append(col)
        (b_eq if problem.sensor_mode[j] is Mode.EXACTLY_ONE else b_ub).append(1.0)
    return A_ub, b_ub, A_eq, b_eq


def feasible_start(problem: SchedulingProblem) -> np.ndarray:
    """Feasible assignment spreading weight over every informative link.

    Maximizes the smallest weight placed on a link with nonzero information
    (an LP), so every system sees all of its sensors and is detectable
    whenever the problem's detectability assumption holds.
    """
    N, M = problem.N, problem.M
    useful = np.array([[np.any(problem.information(i, j)) for j in range(M)] for i in range(N)]).reshape(-1)
    nv = N * M + 1
    A_ub, b_ub, A_eq, b_eq = _constraint_rows(problem)
    A_ub = [np.append(r, 0.0) for r in A_ub]
    A_eq = [np.append(r, 0.0) for r in A_eq]
    for k in np.flatnonzero(useful):
        r = np.zeros(nv)
        r[k] = -1.0
        r[-1] = 1.0
        A_ub.append(r)
        b_ub.append(0.0)
    c = np.zeros(nv)
    c[-1] = -1.0
    res = linprog(
        c,
        A_ub=np.array(A_ub) if A_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        A_eq=np.array(A_eq) if A_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        bounds=[(0.0, 1.0)] * nv,
        method="highs",
    )
    if not res.success:
        raise NoFeasibleStartError(f"assignment constraints are infeasible: {res.message}")
    p = np.clip(res.x[:-1].reshape(N, M), 0.0, 1.0)
    for i in range(N):
        if not detectability_with_weights(problem, i, p[i]):
            raise NoFeasibleStartError(f"no feasible assignment makes system {i} detectable")
    return p


def _vertex_atoms(p: np.ndarray) -> dict:
    N, M = p.shape
    atoms = {}
    for atom in birkhoff_decompose(pad_square(p)):
        v = np.ascontiguousarray(atom.pattern[:N, :M])
        key = v.tobytes()
        w = atoms.get(key, (0.0, v))[0]
        atoms[key] = (w + atom.phi, v)
    total = sum(w for w, _ in atoms.values())
    return {k: (w / total, v) for k, (w, v) in atoms.items()}


# --------------------------------------------------------------------------
# solvers


def solve_bound(problem: SchedulingProblem, tol: float = 1e-6, max_iters: int = 1000,
                start=None) -> BoundResult:
    """Frank-Wolfe (with away steps) on the reduced convex program.

    Stops when the Frank-Wolfe gap ``<grad, p - LMO(grad)>`` is below ``tol``;
    by convexity the returned value is then within ``tol`` of the bound.
    """
    p0 = feasible_start(problem) if start is None else _require_feasible(problem, start)
    atoms = _vertex_atoms(p0)

    def value_grad(p):
        f, g, sig = _value_and_grad(problem, p)
        return f, g, sig

    def lmo(g):
        return assignment_lmo(g, problem.sensor_mode, problem.system_mode)

    history = []
    p, f, g, sigmas, gap, iters, _ = _away_step_fw(value_grad, lmo, atoms, tol, max_iters, history,
                                                   correct_every=5)
    log.debug("solve_bound: value %.12g gap %.3e after %d iterations", f, gap, iters)
    return BoundResult(f, p, sigmas, gap, iters, "fw", history)


def _repair(problem, q):
    """Closest feasible assignment to ``q`` in the L1 sense (LP)."""
    if is_feasible(problem, q):
        return np.clip(q, 0.0, 1.0)
    N, M = problem.N, problem.M
    n = N * M
    A_ub, b_ub, A_eq, b_eq = _constraint_rows(problem)
    # variables [p, t] with t >= |p - q|
    A_ub = [np.concatenate([r, np.zeros(n)]) for r in A_ub]
    A_eq = [np.concatenate([r, np.zeros(n)]) for r in A_eq]
    flat = q.reshape(-1)
    for k in range(n):
        r = np.zeros(2 * n)
        r[k], r[n + k] = 1.0, -1.0
        A_ub.append(r)
        b_ub.append(flat[k])
        r = np.zeros(2 * n)
        r[k], r[n + k] = -1.0, -1.0
        A_ub.append(r)
        b_ub.append(-flat[k])
    c = np.concatenate([np.zeros(n), np.ones(n)])
    res = linprog(
        c,
        A_ub=np.array(A_ub),
        b_ub=np.array(b_ub),
        A_eq=np.array(A_eq) if A_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        bounds=[(0.0, 1.0)] * n + [(0.0, None)] * n,
        method="highs",
    )
    if not res.success:
        return None
    return np.clip(res.x[:n].reshape(N, M), 0.0, 1.0)


def _cutting_plane_step(cuts, center, radius, free):
    """Maximize the cutting-plane model of the dual inside a box around ``center``.

    Returns the model maximizer, the model value there and the convex weights
    of the cuts (LP multipliers), which combine past subproblem solutions
    into a primal estimate.
    """
    M = center.size
    c = np.zeros(M + 1)
    c[-1] = -1.0
    A_ub = np.array([np.append(-g, 1.0) for _, g, _ in cuts])
    b_ub = np.array([value - float(g @ lam) for value, g, lam in cuts])
    bounds = []
    for j in range(M):
        lo = center[j] - radius
        if not free[j]:
            lo = max(lo, 0.0)
        bounds.append((lo, center[j] + radius))
    bounds.append((None, None))
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        return None
    weights = np.clip(-res.ineqlin.marginals, 0.0, None)
    if weights.sum() > 0:
        weights = weights / weights.sum()
    return res.x[:M], float(res.x[-1]), weights


def dual_decomposition_solve(problem: SchedulingProblem, tol: float = 1e-6, max_iters: int = 300,
                             inner_tol: float | None = None, outer: str = "cutting-plane") -> BoundResult:
    """Maximize the dual of the sensor coupling constraints.

    The multipliers ``lambda_j`` price sensor ``j`` (nonnegative for
    at-most-one sensors, free for exactly-one sensors).  For fixed prices the
    problem separates into one subproblem per system over its row of ``p``,
    each solved by pairwise Frank-Wolfe; the dual value is certified up to the
    subproblem gaps and the column sums minus one form a supergradient.

    ``outer`` selects the multiplier update: ``"cutting-plane"`` (box-step
    cutting planes, the default) or ``"subgradient"`` (projected supergradient
    with Polyak steps towards a target level lowered whenever the dual
    stalls).  A primal upper bound comes from repairing combinations of the
    subproblem solutions to feasible assignments; iteration stops when the
    two bounds agree to ``tol`` relative to the bound's magnitude.
    """
    if outer not in ("cutting-plane", "subgradient"):
        raise ValueError(f"unknown outer method {outer!r}")
    N, M = problem.N, problem.M
    p_start = feasible_start(problem)
    z_start = evaluate_objective(problem, p_start, check=False).value
    scale = max(1.0, abs(z_start))
    if inner_tol is None:
        inner_tol = 0.1 * tol * scale / N
    free = np.array([m is Mode.EXACTLY_ONE for m in problem.sensor_mode])

    row_atoms = []
    for i in range(N):
        q0 = np.full(M, 1.0 / M)
        row_atoms.append({np.eye(M)[j].tobytes(): (1.0 / M, np.eye(M)[j]) for j in range(M)})
        if not detectability_with_weights(problem, i, q0):
            raise NoFeasibleStartError(f"system {i} is not detectable even with every sensor")

    def solve_rows(lam):
        q = np.zeros((N, M))
        lower = 0.0
        for i in range(N):
            system_mode = problem.system_mode[i]

            def value_grad(row, i=i):
                value, sigma, S, _ = _system_value(problem, i, row)
                if sigma is None:
                    return math.inf, None, None
                try:
                    grad = _system_gradient(problem, i, sigma, S)
                except GradientUnavailableError:
                    return math.inf, None, None
                return value + float(lam @ row), grad + lam, sigma

            row, value, _, _, gap, _, atoms = _away_step_fw(
                value_grad, lambda g, mode=system_mode: _row_lmo(g, mode), row_atoms[i], inner_tol, 500,
                pairwise=True,
            )
            row_atoms[i] = atoms
            q[i] = row
            lower += value - max(gap, 0.0)
        return q, lower - float(lam.sum())

    best_lower, best_lam = -math.inf, np.zeros(M)
    best_upper, best_p = z_start, p_start

    def offer_primal(candidate):
        nonlocal best_upper, best_p
        repaired = _repair(problem, candidate)
        if repaired is None:
            return
        upper = evaluate_objective(problem, repaired, check=False).value
        if upper < best_upper:
            best_upper, best_p = upper, repaired

    # prices of the order of the marginal value of sensing at the start
    radius = max(1.0, float(np.max(np.abs(objective_gradient(problem, p_start, check=False)))))
    lam = np.zeros(M)
    center, center_value = None, -math.inf
    cuts, solutions = [], []
    delta, stalled = None, 0
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        q, lower = solve_rows(lam)
        g = q.sum(axis=0) - 1.0
        cuts.append((lower, g, lam.copy()))
        solutions.append(q)
        improved = lower > best_lower
        if improved:
            best_lower, best_lam = lower, lam.copy()
        offer_primal(q)
        history.append({"iteration": it, "dual": lower, "primal": best_upper})
        if best_upper - best_lower <= tol * scale:
            break

        if outer == "cutting-plane":
            if center is None or lower >= center_value + 0.1 * (predicted - center_value):
                if center is not None and np.max(np.abs(lam - center)) >= 0.999 * radius:
                    radius *= 2.0
                center, center_value = lam.copy(), lower
            step = _cutting_plane_step(cuts, center, radius, free)
            if step is None:
                break
            lam, predicted, weights = step
            offer_primal(sum(w * x for w, x in zip(weights, solutions)))
            history[-1]["primal"] = best_upper
            interior = np.max(np.abs(lam - center)) < 0.999 * radius
            if interior and predicted - best_lower <= tol * scale:
                # the model bounds the dual from above everywhere
                break
            continue

        g_proj = g.copy()
        g_proj[(~free) & (lam <= 0) & (g < 0)] = 0.0
        norm2 = float(g_proj @ g_proj)
        if norm2 <= 1e-30:
            break
        if delta is None:
            delta = 0.5 * max(best_upper - lower, tol * scale)
        stalled = 0 if lower > best_lower - 1e-3 * delta and improved else stalled + 1
        if stalled >= 3:
            delta *= 0.5
            stalled = 0
        offer_primal(np.mean(solutions[len(solutions) // 2:], axis=0))
        target = min(best_upper, best_lower + delta)
        lam = lam + max(target - lower, 0.0) / norm2 * g_proj
        lam[~free] = np.maximum(lam[~free], 0.0)
    sigmas = evaluate_objective(problem, best_p, check=False).sigmas
    return BoundResult(
        best_lower,
        best_p,
        sigmas,
        best_upper - best_lower,
        it,
        "dual",
        history,
        lambda_star=best_lam,
        primal_value=best_upper,
    )
