"""Birkhoff-von Neumann decomposition of relaxed assignments into switching schedules.

An ``N x M`` assignment ``p`` (doubly substochastic after zero padding) is
written as a convex combination of partial permutation patterns.  Cycling
through the patterns for durations ``phi_k * epsilon`` realizes the time
fractions ``p`` exactly within every cycle of length ``epsilon``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DecompositionStalledError, StructuralError
from .model import SchedulingProblem
from .riccati import PiecewiseConstantInformation

FEAS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SubstochasticSquare:
    """Zero-padded square matrix plus the map from padded indices to the problem.

    Rows ``>= n_systems`` are dummy systems, columns ``>= n_sensors`` are
    dummy sensors.
    """

    entries: np.ndarray
    n_systems: int
    n_sensors: int

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def row_origin(self, r: int):
        return ("system", r) if r < self.n_systems else ("dummy", r - self.n_systems)

    def col_origin(self, c: int):
        return ("sensor", c) if c < self.n_sensors else ("dummy", c - self.n_sensors)


@dataclass(frozen=True, eq=False)
class Atom:
    phi: float
    pattern: np.ndarray


def check_substochastic(p: np.ndarray, tol: float = FEAS_TOL) -> None:
    if np.any(p < -tol) or np.any(p > 1 + tol):
        raise StructuralError("assignment entries must lie in [0, 1]")
    if np.any(p.sum(axis=0) > 1 + tol) or np.any(p.sum(axis=1) > 1 + tol):
        raise StructuralError("assignment row and column sums must not exceed 1")


def pad_square(p) -> SubstochasticSquare:
    """Pad ``p`` with zero rows (dummy systems) or columns (dummy sensors)."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    check_substochastic(p)
    N, M = p.shape
    n = max(N, M)
    sq = np.zeros((n, n))
    sq[:N, :M] = np.clip(p, 0.0, 1.0)
    return SubstochasticSquare(sq, N, M)


def _as_square(sq) -> SubstochasticSquare:
    if isinstance(sq, SubstochasticSquare):
        return sq
    arr = np.atleast_2d(np.asarray(sq, dtype=float))
    if arr.shape[0] != arr.shape[1]:
        return pad_square(arr)
    check_substochastic(arr)
    return SubstochasticSquare(np.clip(arr, 0.0, 1.0), arr.shape[0], arr.shape[1])


def extend_doubly_stochastic(sq) -> np.ndarray:
    """The 2n x 2n doubly stochastic matrix [[P, I - Dr], [I - Dc, P^T]]."""
    P = _as_square(sq).entries
    n = P.shape[0]
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = P
    out[:n, n:] = np.diag(1.0 - P.sum(axis=1))
    out[n:, :n] = np.diag(1.0 - P.sum(axis=0))
    out[n:, n:] = P.T
    return out


def _try_augment(u, adj, match_row, match_col, seen) -> bool:
    for v in adj[u]:
        if seen[v]:
            continue
        seen[v] = True
        if match_col[v] < 0 or _try_augment(match_col[v], adj, match_row, match_col, seen):
            match_col[v] = u
            match_row[u] = v
            return True
    return False


def _perfect_matching(support: np.ndarray, match_row: list, match_col: list) -> bool:
    """Complete a partial matching to a perfect one on ``support`` (in place).

    Rows are processed in order and columns tried in ascending order, so the
    result is deterministic.
    """
    n = support.shape[0]
    adj = [np.flatnonzero(support[u]).tolist() for u in range(n)]
    for u in range(n):
        if match_row[u] < 0:
            if not _try_augment(u, adj, match_row, match_col, [False] * n):
                return False
    return True


def birkhoff_decompose(sq, tol: float = 1e-12) -> list[Atom]:
    """Greedy peeling of the doubly stochastic extension into permutations.

    Each round finds a perfect matching on the entries above ``tol``, peels
    off the smallest matched entry, and truncates the permutation to the
    original block.  Identical truncated patterns are merged; the all-zero
    pattern (idle time) is kept as a single atom so the weights sum to one.
    Atoms are returned in descending order of weight.
    """
    sq = _as_square(sq)
    n = sq.size
    R = extend_doubly_stochastic(sq)
    size = 2 * n
    match_row = [-1] * size
    match_col = [-1] * size
    raw = []
    total = 0.0
    max_rounds = (size - 1) ** 2 + 1
    while total < 1.0 - tol and len(raw) < max_rounds:
        support = R > tol
        for u in range(size):
            v = match_row[u]
            if v >= 0 and not support[u, v]:
                match_row[u] = -1
                match_col[v] = -1
        if not _perfect_matching(support, match_row, match_col):
            break
        rows = np.arange(size)
        cols = np.array(match_row)
        vals = R[rows, cols]
        k = int(np.argmin(vals))
        phi = float(vals[k])
        R[rows, cols] -= phi
        R[rows[k], cols[k]] = 0.0
        R[R <= tol] = 0.0
        raw.append((phi, cols.copy()))
        total += phi
    residual = 1.0 - total
    if residual > 1e-9:
        raise DecompositionStalledError(
            f"no perfect matching on the residual support (unassigned mass {residual:.3e})", residual
        )
    merged: dict = {}
    for phi, perm in raw:
        pattern = np.zeros((n, n))
        for r in range(n):
            if perm[r] < n:
                pattern[r, perm[r]] = 1.0
        key = pattern.tobytes()
        if key in merged:
            merged[key] = (merged[key][0] + phi, pattern)
        else:
            merged[key] = (phi, pattern)
    atoms = [Atom(phi, pattern) for phi, pattern in merged.values()]
    # descending weight; stable sort keeps discovery order among ties
    return sorted(atoms, key=lambda a: -a.phi)


@dataclass(frozen=True, eq=False)
class SwitchingSchedule:
    """Periodic schedule: pattern ``k`` is active for ``phi_k * epsilon`` per cycle."""

    atoms: tuple
    epsilon: float
    n_systems: int
    n_sensors: int

    @property
    def phis(self) -> np.ndarray:
        return np.array([a.phi for a in self.atoms])

    @property
    def durations(self) -> np.ndarray:
        phis = self.phis
        return self.epsilon * phis / phis.sum()

    @property
    def switch_times(self) -> np.ndarray:
        """Start of each atom within a cycle."""
        d = self.durations
        return np.concatenate([[0.0], np.cumsum(d)[:-1]])

    def sensor_of(self, i: int) -> list[int]:
        """Sensor observing system ``i`` under each atom (-1 when unobserved)."""
        out = []
        for atom in self.atoms:
            cols = np.flatnonzero(atom.pattern[i, : self.n_sensors])
            out.append(int(cols[0]) if cols.size else -1)
        return out

    def active_sensor(self, i: int, t) -> np.ndarray:
        """Sensor observing system ``i`` at times ``t`` (-1 when unobserved).

        Intervals are closed on the left: at a switch time the new atom is
        reported.
        """
        t = np.asarray(t, dtype=float)
        phase = np.mod(t, self.epsilon)
        starts = self.switch_times
        idx = np.searchsorted(starts, phase, side="right") - 1
        sensors = np.array(self.sensor_of(i))
        return sensors[np.clip(idx, 0, len(sensors) - 1)]

    def time_fractions(self) -> np.ndarray:
        """Fraction of each cycle that sensor j spends on system i."""
        phis = self.phis / self.phis.sum()
        P = sum(phi * a.pattern for phi, a in zip(phis, self.atoms))
        return P[: self.n_systems, : self.n_sensors]

    def information_signal(self, problem: SchedulingProblem, i: int) -> PiecewiseConstantInformation:
        n = problem.systems[i].n
        values = [
            problem.information(i, j) if j >= 0 else np.zeros((n, n)) for j in self.sensor_of(i)
        ]
        starts = self.switch_times
        # drop zero-length atoms so breakpoints stay strictly ascending
        keep = [0] + [k for k in range(1, len(starts)) if starts[k] > starts[k - 1]]
        keep = [k for k in keep if starts[k] < self.epsilon]
        return PiecewiseConstantInformation(starts[keep], [values[k] for k in keep], self.epsilon)

    def to_dict(self) -> dict:
        return {
            "atoms": [
                {"phi": float(a.phi), "pattern": a.pattern[: self.n_systems, : self.n_sensors].astype(int).tolist()}
                for a in self.atoms
            ],
            "epsilon": self.epsilon,
            "switch_times": self.switch_times.tolist(),
        }


def build_schedule(atoms: Sequence[Atom], epsilon: float, shape: tuple[int, int] | None = None) -> SwitchingSchedule:
    """Cycle through ``atoms`` in the given order with period ``epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    atoms = list(atoms)
    if not atoms:
        raise StructuralError("schedule needs at least one atom")
    if shape is None:
        shape = atoms[0].pattern.shape
    return SwitchingSchedule(tuple(atoms), float(epsilon), int(shape[0]), int(shape[1]))


def schedule_from_assignment(p, epsilon: float, tol: float = 1e-12) -> SwitchingSchedule:
    sq = pad_square(p)
    return build_schedule(birkhoff_decompose(sq, tol), epsilon, (sq.n_systems, sq.n_sensors))
