"""Problem description: linear systems, sensor links and assignment constraints.

A :class:`SchedulingProblem` holds ``N`` independent linear systems and a dense
``N x M`` grid of sensor links.  Each link carries the observation matrix
``C``, the measurement-noise density ``V`` and the per-time cost ``kappa``.
Physically absent sensors are encoded as ``C = 0, V = I, kappa = 0``.

Constraint modes follow the two flavours of the pathwise resource constraints:
``at-most-one`` (inequality) or ``exactly-one`` (equality), set per sensor and
per system.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import StructuralError

RANK_TOL = 1e-8
EIG_TOL = 1e-10


class Mode(str, enum.Enum):
    AT_MOST_ONE = "at-most-one"
    EXACTLY_ONE = "exactly-one"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        aliases = {"ineq": cls.AT_MOST_ONE, "eq": cls.EXACTLY_ONE}
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise StructuralError(
                f"unknown constraint mode {value!r}; expected 'at-most-one' or 'exactly-one'"
            ) from None


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce a scalar, nested list or array into a read-only 2-D float array."""
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise StructuralError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise StructuralError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SystemModel:
    A: np.ndarray
    W: np.ndarray
    Sigma0: np.ndarray
    T_weight: np.ndarray

    def __post_init__(self):
        for name in ("A", "W", "Sigma0", "T_weight"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        n = self.A.shape[0]
        for name in ("A", "W", "Sigma0", "T_weight"):
            if getattr(self, name).shape != (n, n):
                raise StructuralError(
                    f"{name}: expected shape {(n, n)}, got {getattr(self, name).shape}"
                )

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class SensorLink:
    C: np.ndarray
    V: np.ndarray
    kappa: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "C", as_matrix(self.C, "C"))
        object.__setattr__(self, "V", as_matrix(self.V, "V"))
        kappa = float(self.kappa)
        if not np.isfinite(kappa) or kappa < 0:
            raise StructuralError(f"kappa must be finite and nonnegative, got {self.kappa!r}")
        object.__setattr__(self, "kappa", kappa)
        m = self.C.shape[0]
        if self.V.shape != (m, m):
            raise StructuralError(f"V: expected shape {(m, m)} to match C rows, got {self.V.shape}")

    @property
    def information(self) -> np.ndarray:
        """C^T V^{-1} C, the information rate contributed by this link."""
        if not np.any(self.C):
            n = self.C.shape[1]
            return np.zeros((n, n))
        info = self.C.T @ np.linalg.solve(self.V, self.C)
        return 0.5 * (info + info.T)

    @classmethod
    def absent(cls, n: int) -> "SensorLink":
        return cls(C=np.zeros((1, n)), V=np.eye(1), kappa=0.0)


@dataclass(frozen=True, eq=False)
class SchedulingProblem:
    systems: tuple
    links: tuple
    sensor_mode: tuple
    system_mode: tuple
    _info: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        systems = tuple(self.systems)
        links = tuple(tuple(row) for row in self.links)
        if not systems:
            raise StructuralError("problem has no systems")
        if len(links) != len(systems):
            raise StructuralError(f"links has {len(links)} rows but there are {len(systems)} systems")
        M = len(links[0])
        if M == 0:
            raise StructuralError("problem has no sensors")
        for i, (system, row) in enumerate(zip(systems, links)):
            if len(row) != M:
                raise StructuralError(f"links row {i} has {len(row)} entries, expected {M}")
            for j, link in enumerate(row):
                if link.C.shape[1] != system.n:
                    raise StructuralError(
                        f"link ({i},{j}): C has {link.C.shape[1]} columns but system {i} has n={system.n}"
                    )
        sensor_mode = tuple(Mode.parse(m) for m in self.sensor_mode)
        system_mode = tuple(Mode.parse(m) for m in self.system_mode)
        if len(sensor_mode) != M:
            raise StructuralError(f"sensor_mode has {len(sensor_mode)} entries, expected {M}")
        if len(system_mode) != len(systems):
            raise StructuralError(f"system_mode has {len(system_mode)} entries, expected {len(systems)}")
        object.__setattr__(self, "systems", systems)
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "sensor_mode", sensor_mode)
        object.__setattr__(self, "system_mode", system_mode)
        info = []
        for row in links:
            mats = []
            for link in row:
                mat = link.information
                mat.setflags(write=False)
                mats.append(mat)
            info.append(tuple(mats))
        object.__setattr__(self, "_info", tuple(info))

    @property
    def N(self) -> int:
        return len(self.systems)

    @property
    def M(self) -> int:
        return len(self.links[0])

    def information(self, i: int, j: int) -> np.ndarray:
        return self._info[i][j]

    @property
    def kappa(self) -> np.ndarray:
        return np.array([[link.kappa for link in row] for row in self.links])

    @classmethod
    def uniform(cls, systems, links, sensor_mode="at-most-one", system_mode="at-most-one"):
        """Build a problem with one mode for all sensors and one for all systems."""
        links = [list(row) for row in links]
        return cls(
            systems=systems,
            links=links,
            sensor_mode=[sensor_mode] * len(links[0]),
            system_mode=[system_mode] * len(links),
        )


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    check: str
    subject: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple

    @property
    def ok(self) -> bool:
        return all(f.passed for f in self.findings)

    def failures(self) -> list:
        return [f for f in self.findings if not f.passed]

    def render(self) -> str:
        lines = []
        for f in self.findings:
            mark = "PASS" if f.passed else "FAIL"
            line = f"[{mark}] {f.check}: {f.subject}"
            if f.detail:
                line += f" ({f.detail})"
            lines.append(line)
        lines.append("all assumptions hold" if self.ok else f"{len(self.failures())} check(s) failed")
        return "\n".join(lines)


def _sym_eigs(X: np.ndarray) -> tuple[np.ndarray, bool]:
    asym = np.max(np.abs(X - X.T)) if X.size else 0.0
    symmetric = asym <= EIG_TOL * (1.0 + np.max(np.abs(X)))
    return np.linalg.eigvalsh(0.5 * (X + X.T)), bool(symmetric)


def is_psd(X: np.ndarray, tol: float = EIG_TOL) -> bool:
    eig, sym = _sym_eigs(X)
    return sym and eig.min() >= -tol * max(abs(np.trace(X)), 1.0)


def is_pd(X: np.ndarray, tol: float = EIG_TOL) -> bool:
    eig, sym = _sym_eigs(X)
    return sym and eig.min() > tol * abs(np.trace(X))


def _numerical_rank(M: np.ndarray) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_TOL * s[0]))


def pbh_detectable(A: np.ndarray, H: np.ndarray) -> bool:
    """PBH test: every mode with Re(lambda) >= 0 is seen by the rows of H."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real < 0:
            continue
        if _numerical_rank(np.vstack([A - lam * np.eye(n), H])) < n:
            return False
    return True


def pbh_controllable(A: np.ndarray, B: np.ndarray) -> bool:
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if _numerical_rank(np.hstack([A - lam * np.eye(n), B])) < n:
            return False
    return True


def psd_sqrt(X: np.ndarray) -> np.ndarray:
    eig, vec = np.linalg.eigh(0.5 * (X + X.T))
    return (vec * np.sqrt(np.clip(eig, 0.0, None))) @ vec.T


def composite_information(problem: SchedulingProblem, i: int, weights: Sequence[float]) -> np.ndarray:
    """Weighted information sum_j w_j C_ij^T V_ij^{-1} C_ij for system ``i``."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (problem.M,):
        raise StructuralError(f"weights: expected length {problem.M}, got shape {weights.shape}")
    n = problem.systems[i].n
    out = np.zeros((n, n))
    for j, w in enumerate(weights):
        if w != 0.0:
            out += w * problem.information(i, j)
    return out


def detectability_with_weights(problem: SchedulingProblem, i: int, weights: Sequence[float]) -> bool:
    S = composite_information(problem, i, weights)
    return pbh_detectable(problem.systems[i].A, S)


def validate_problem(problem: SchedulingProblem) -> ValidationReport:
    findings = []
    for i, system in enumerate(problem.systems):
        tag = f"system {i}"
        findings.append(Finding("W symmetric PSD", tag, is_psd(system.W)))
        sigma_ok = is_pd(system.Sigma0)
        findings.append(
            Finding(
                "Sigma0 symmetric PD",
                tag,
                sigma_ok,
                "" if sigma_ok else "add a small multiple of the identity to Sigma0",
            )
        )
        findings.append(Finding("T symmetric PSD", tag, is_psd(system.T_weight)))
        for j, link in enumerate(problem.links[i]):
            if not is_pd(link.V):
                findings.append(Finding("V symmetric PD", f"link ({i},{j})", False))
        if all(is_pd(link.V) for link in problem.links[i]):
            detect = detectability_with_weights(problem, i, np.ones(problem.M))
        else:
            detect = False
        findings.append(
            Finding("(A, stacked C V^-1/2) detectable", tag, detect, "" if detect else "an unstable mode is unobserved")
        )
        ctrb = pbh_controllable(system.A, psd_sqrt(system.W))
        findings.append(
            Finding("(A, W^1/2) controllable", tag, ctrb, "" if ctrb else "PBH rank deficit")
        )
    eq_systems = sum(m is Mode.EXACTLY_ONE for m in problem.system_mode)
    eq_sensors = sum(m is Mode.EXACTLY_ONE for m in problem.sensor_mode)
    feasible = eq_systems <= problem.M and eq_sensors <= problem.N
    findings.append(
        Finding(
            "exactly-one constraints feasible",
            "problem",
            feasible,
            "" if feasible else f"{eq_systems} exactly-one systems, {eq_sensors} exactly-one sensors",
        )
    )
    return ValidationReport(tuple(findings))


# --------------------------------------------------------------------------
# file format


def _matrix_to_list(X: np.ndarray) -> list:
    return [[float(v) for v in row] for row in X]


def problem_to_dict(problem: SchedulingProblem) -> dict:
    return {
        "systems": [
            {
                "A": _matrix_to_list(s.A),
                "W": _matrix_to_list(s.W),
                "Sigma0": _matrix_to_list(s.Sigma0),
                "T": _matrix_to_list(s.T_weight),
            }
            for s in problem.systems
        ],
        "links": [
            [{"C": _matrix_to_list(l.C), "V": _matrix_to_list(l.V), "kappa": l.kappa} for l in row]
            for row in problem.links
        ],
        "sensor_mode": [m.value for m in problem.sensor_mode],
        "system_mode": [m.value for m in problem.system_mode],
    }


def _get(tree: dict, key: str, where: str) -> Any:
    if not isinstance(tree, dict) or key not in tree:
        raise StructuralError(f"{where}: missing key {key!r}")
    return tree[key]


def problem_from_dict(tree: dict) -> SchedulingProblem:
    systems = []
    for i, entry in enumerate(_get(tree, "systems", "problem")):
        where = f"systems[{i}]"
        try:
            systems.append(
                SystemModel(
                    A=_get(entry, "A", where),
                    W=_get(entry, "W", where),
                    Sigma0=_get(entry, "Sigma0", where),
                    T_weight=_get(entry, "T", where),
                )
            )
        except StructuralError:
            raise
        except (TypeError, ValueError) as exc:
            raise StructuralError(f"{where}: {exc}") from exc
    links = []
    for i, row in enumerate(_get(tree, "links", "problem")):
        parsed = []
        for j, entry in enumerate(row):
            where = f"links[{i}][{j}]"
            try:
                parsed.append(
                    SensorLink(
                        C=_get(entry, "C", where),
                        V=_get(entry, "V", where),
                        kappa=entry.get("kappa", 0.0),
                    )
                )
            except StructuralError:
                raise
            except (TypeError, ValueError) as exc:
                raise StructuralError(f"{where}: {exc}") from exc
        links.append(parsed)
    n_sensors = len(links[0]) if links else 0
    sensor_mode = tree.get("sensor_mode", ["at-most-one"] * n_sensors)
    system_mode = tree.get("system_mode", ["at-most-one"] * len(systems))
    return SchedulingProblem(systems=systems, links=links, sensor_mode=sensor_mode, system_mode=system_mode)


def loads_problem(text: str) -> SchedulingProblem:
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StructuralError(f"malformed problem file at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return problem_from_dict(tree)


def load_problem(path) -> SchedulingProblem:
    return loads_problem(Path(path).read_text(encoding="utf-8"))


def dumps_problem(problem: SchedulingProblem) -> str:
    # json renders floats with repr, which round-trips bit-exactly
    return json.dumps(problem_to_dict(problem), indent=2)


def dump_problem(problem: SchedulingProblem, path) -> None:
    Path(path).write_text(dumps_problem(problem) + "\n", encoding="utf-8")


def scalar_problem(
    A: Sequence[float],
    C: Sequence[float] | float = 1.0,
    V: Sequence[float] | float = 1.0,
    W: Sequence[float] | float = 1.0,
    T: Sequence[float] | float = 1.0,
    kappa: Sequence[float] | float = 0.0,
    M: int = 1,
    Sigma0: Sequence[float] | float = 1.0,
    sensor_mode: str = "at-most-one",
    system_mode: str = "at-most-one",
) -> SchedulingProblem:
    """Scalar sites observed by ``M`` identical sensors."""
    N = len(A)

    def per_site(x):
        return list(np.broadcast_to(np.asarray(x, dtype=float), (N,)))

    C, V, W, T, kappa, Sigma0 = map(per_site, (C, V, W, T, kappa, Sigma0))
    systems = [SystemModel(A=A[i], W=W[i], Sigma0=Sigma0[i], T_weight=T[i]) for i in range(N)]
    links = [[SensorLink(C=C[i], V=V[i], kappa=kappa[i]) for _ in range(M)] for i in range(N)]
    return SchedulingProblem.uniform(systems, links, sensor_mode, system_mode)
