"""Lyapunov, algebraic Riccati and differential Riccati solvers.

Conventions follow the filtering form used throughout the package::

    Lyapunov:  F X + X F^T + Q = 0
    ARE:       A S + S A^T + W - S Info S = 0
    RDE:       dS/dt = A S + S A^T + W - S Info(t) S

``Info`` is the information rate ``sum_j w_j C_j^T V_j^{-1} C_j``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateSensorError,
    IntegrationBlowupError,
    NoStabilizingSolutionError,
    PeriodicNonConvergenceError,
    SingularSylvesterError,
    SolverDivergedError,
)
from .model import pbh_detectable

MAX_CYCLES = 100_000


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def solve_lyapunov(F, Q) -> np.ndarray:
    """Solve ``F X + X F^T + Q = 0`` (Bartels-Stewart via real Schur form)."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if F.shape == (1, 1):
        f = float(F[0, 0])
        if abs(f) <= 1e-12:
            raise SingularSylvesterError(f"F and -F share an eigenvalue (F = {f:.3e})")
        return -Q / (2.0 * f)
    eig = np.linalg.eigvals(F)
    scale = max(1.0, float(np.max(np.abs(eig))))
    sums = np.abs(eig[:, None] + eig[None, :])
    if sums.min() <= 1e-12 * scale:
        raise SingularSylvesterError(
            f"F and -F share an eigenvalue (min |l_i + l_j| = {sums.min():.3e})"
        )
    X = scipy.linalg.solve_continuous_lyapunov(F, -Q)
    if np.allclose(Q, Q.T):
        X = _sym(X)
    return X


def care_residual(A, S, W, Sigma) -> np.ndarray:
    return A @ Sigma + Sigma @ A.T + W - Sigma @ S @ Sigma


def relative_care_residual(A, S, W, Sigma) -> float:
    R = care_residual(A, S, W, Sigma)
    scale = (
        np.linalg.norm(W)
        + 2.0 * np.linalg.norm(A @ Sigma)
        + np.linalg.norm(Sigma @ S @ Sigma)
    )
    return float(np.linalg.norm(R) / max(scale, np.finfo(float).tiny))


def _information_factor(S: np.ndarray) -> np.ndarray:
    """Return H with H^T H = S (rows only for the numerically nonzero spectrum)."""
    eig, vec = np.linalg.eigh(_sym(S))
    top = max(float(eig.max(initial=0.0)), 0.0)
    keep = eig > 1e-14 * max(top, 1e-300)
    if top == 0.0:
        return np.zeros((0, S.shape[0]))
    return (vec[:, keep] * np.sqrt(eig[keep])).T


def _stabilizing_gain(A: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Gain L with A - L H Hurwitz, by a shifted Lyapunov (Bass) construction.

    Only the unstable part of the spectrum is shifted: the real Schur form of
    A^T is ordered with the stable block first, and the Bass gain is built for
    the trailing (unstable, hence controllable) block.
    """
    n = A.shape[0]
    if np.max(np.linalg.eigvals(A).real) < 0:
        return np.zeros((n, H.shape[0]))
    T, U, sdim = scipy.linalg.schur(A.T, output="real", sort="lhp")
    T22 = T[sdim:, sdim:]
    B2 = (U.T @ H.T)[sdim:, :]
    k = T22.shape[0]
    beta = max(1.0, float(np.linalg.norm(T22, 1)))
    Z = solve_lyapunov(T22 + beta * np.eye(k), -2.0 * B2 @ B2.T)
    try:
        K2 = np.linalg.solve(_sym(Z), B2).T
    except np.linalg.LinAlgError as exc:
        raise NoStabilizingSolutionError("unstable modes are not observable") from exc
    K = np.hstack([np.zeros((H.shape[0], sdim)), K2]) @ U.T
    return K.T


def _scalar_care(a: float, s: float, w: float) -> np.ndarray:
    """Closed-form stabilizing root of ``2 a x + w - s x^2 = 0``."""
    if s > 0:
        r = math.sqrt(a * a + s * w)
        # both forms are the same root; pick the one free of cancellation
        x = (a + r) / s if a >= 0 else w / (r - a)
    elif a < 0:
        x = -w / (2.0 * a)
    else:
        raise NoStabilizingSolutionError("(A, Info^1/2) is not detectable")
    if not math.isfinite(x):
        raise SolverDivergedError("scalar ARE root is not finite", [])
    return np.array([[x]])


def solve_care(A, S, W, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Stabilizing solution of ``A X + X A^T + W - X S X = 0`` by Newton-Kleinman.

    Each Newton step solves the closed-loop Lyapunov equation
    ``(A - L H) X + X (A - L H)^T + W + L L^T = 0`` with ``L = X H^T`` and
    ``S = H^T H``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = _sym(np.atleast_2d(np.asarray(S, dtype=float)))
    W = _sym(np.atleast_2d(np.asarray(W, dtype=float)))
    if A.shape == (1, 1):
        return _scalar_care(float(A[0, 0]), float(S[0, 0]), float(W[0, 0]))
    if not pbh_detectable(A, S):
        raise NoStabilizingSolutionError("(A, Info^1/2) is not detectable")
    H = _information_factor(S)
    L = _stabilizing_gain(A, H)
    history = []
    X = None
    for _ in range(max_iter):
        Acl = A - L @ H
        X_new = solve_lyapunov(Acl, W + L @ L.T)
        res = relative_care_residual(A, S, W, X_new)
        history.append(res)
        step = np.inf if X is None else np.max(np.abs(X_new - X)) / max(1.0, np.max(np.abs(X_new)))
        X = X_new
        L = X @ H.T
        if res <= tol or step <= 1e-15:
            break
    if not np.all(np.isfinite(X)) or history[-1] > 1e-9:
        raise SolverDivergedError(
            f"Newton-Kleinman stopped at relative residual {history[-1]:.3e}", history
        )
    if np.max(np.linalg.eigvals(A - X @ S).real) >= 0:
        raise SolverDivergedError("closed loop A - X S is not Hurwitz", history)
    return X


def scalar_riccati_roots(A: float, C: float, V: float, W: float) -> tuple[float, float]:
    """Roots (x1 < 0 < x2) of ``2 A x + W - (C^2/V) x^2 = 0``."""
    if C == 0:
        raise DegenerateSensorError("scalar ARE roots need C != 0")
    g = C * C / V
    root = math.sqrt(A * A + g * W)
    # x1 written in the cancellation-free form -W / (A + root)
    x2 = (A + root) / g
    x1 = -W / (A + root) if A + root != 0 else (A - root) / g
    return x1, x2


# --------------------------------------------------------------------------
# information signals and trajectories


@dataclass(frozen=True, eq=False)
class PiecewiseConstantInformation:
    """Piecewise constant information rate Info(t).

    ``values[k]`` is active on ``[breakpoints[k], breakpoints[k+1])``; with a
    finite ``period`` the pattern repeats, otherwise the last value holds
    forever.
    """

    breakpoints: np.ndarray
    values: tuple
    period: float | None = None

    def __post_init__(self):
        bps = np.asarray(self.breakpoints, dtype=float).reshape(-1)
        vals = tuple(_sym(np.atleast_2d(np.asarray(v, dtype=float))) for v in self.values)
        if len(bps) != len(vals) or len(bps) == 0:
            raise ValueError("need one value per breakpoint")
        if bps[0] != 0.0 or np.any(np.diff(bps) <= 0):
            raise ValueError("breakpoints must start at 0 and be strictly ascending")
        if self.period is not None:
            if not self.period > 0:
                raise ValueError("period must be positive")
            if bps[-1] >= self.period:
                raise ValueError("last breakpoint must be inside the period")
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, S) -> "PiecewiseConstantInformation":
        return cls([0.0], [S], None)

    def segments(self, t0: float, t1: float) -> Iterator[tuple[float, float, np.ndarray]]:
        """Yield ``(start, end, value)`` pieces exactly covering ``[t0, t1]``."""
        if t1 <= t0:
            return
        if self.period is None:
            edges = list(self.breakpoints[1:]) + [math.inf]
            for k, value in enumerate(self.values):
                lo = max(t0, self.breakpoints[k])
                hi = min(t1, edges[k])
                if hi > lo:
                    yield lo, hi, value
            return
        eps = self.period
        cycle = math.floor(t0 / eps)
        while True:
            base = cycle * eps
            if base >= t1:
                return
            for k, value in enumerate(self.values):
                lo = base + self.breakpoints[k]
                hi = base + (self.breakpoints[k + 1] if k + 1 < len(self.values) else eps)
                lo, hi = max(lo, t0), min(hi, t1)
                if hi > lo and hi - lo > 1e-14 * max(1.0, abs(hi)):
                    yield lo, hi, value
            cycle += 1

    def mean(self) -> np.ndarray:
        """Time average over one period (the constant value when aperiodic)."""
        if self.period is None:
            return self.values[-1]
        lengths = np.diff(np.append(self.breakpoints, self.period))
        return sum(w * v for w, v in zip(lengths, self.values)) / self.period


@dataclass(eq=False)
class CovarianceTrajectory:
    times: np.ndarray
    covariances: np.ndarray
    system_index: int = 0
    active: np.ndarray | None = field(default=None)

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.covariances[-1]

    def trace_weighted(self, T) -> np.ndarray:
        return np.einsum("ij,kji->k", np.asarray(T, dtype=float), self.covariances)

    def at(self, t: float) -> np.ndarray:
        """Covariance at time ``t`` by linear interpolation of the stored grid."""
        n = self.covariances.shape[1]
        flat = self.covariances.reshape(len(self.times), -1)
        return np.array([np.interp(t, self.times, flat[:, k]) for k in range(n * n)]).reshape(n, n)


def write_trajectories_csv(path, trajectories: Sequence[CovarianceTrajectory]) -> None:
    """CSV with columns ``t, system, s_00, s_01, ..., active_sensor``."""
    n_max = max(tr.covariances.shape[1] for tr in trajectories)
    header = ["t", "system"] + [f"s_{a}{b}" for a in range(n_max) for b in range(n_max)] + ["active_sensor"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for tr in trajectories:
            n = tr.covariances.shape[1]
            flat = tr.covariances.reshape(len(tr.times), n * n)
            pad = [""] * (n_max * n_max - n * n)
            for k, t in enumerate(tr.times):
                act = "" if tr.active is None else int(tr.active[k])
                writer.writerow([repr(float(t)), tr.system_index] + [repr(float(v)) for v in flat[k]] + pad + [act])


# --------------------------------------------------------------------------
# RK4 integration


def _rde_rhs(A, At, W, S, X):
    return A @ X + X @ At + W - X @ S @ X


def rk4_steps(A, W, S, X, h, nsteps, out=None):
    """Advance the (batched) RDE by ``nsteps`` RK4 steps of size ``h``.

    Arrays carry a leading batch axis: ``A, W, S, X`` of shape ``(B, n, n)``.
    When ``out`` is given, the state after each step is written to
    ``out[k]``.  Returns the final state.
    """
    At = np.swapaxes(A, -1, -2)
    half = 0.5 * h
    for k in range(nsteps):
        k1 = _rde_rhs(A, At, W, S, X)
        k2 = _rde_rhs(A, At, W, S, X + half * k1)
        k3 = _rde_rhs(A, At, W, S, X + half * k2)
        k4 = _rde_rhs(A, At, W, S, X + h * k3)
        X = X + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        X = 0.5 * (X + np.swapaxes(X, -1, -2))
        if out is not None:
            out[k] = X
    return X


def segment_steps(length: float, step_hint: float) -> int:
    return max(1, math.ceil(length / min(step_hint, length / 8.0) - 1e-9))


def _check_pd(block: np.ndarray, times: np.ndarray):
    if not np.all(np.isfinite(block)):
        bad = np.argmax(~np.all(np.isfinite(block.reshape(len(block), -1)), axis=1))
        raise IntegrationBlowupError(f"non-finite covariance at t={times[bad]:.6g}", times[bad])
    n = block.shape[-1]
    if n == 1:
        mins = block.reshape(len(block), -1).min(axis=1)
    else:
        mins = np.linalg.eigvalsh(block.reshape(-1, n, n)).reshape(len(block), -1).min(axis=1)
    scale = np.abs(block.reshape(len(block), -1)).max(axis=1)
    bad = np.nonzero(mins < -1e-9 * np.maximum(scale, 1.0))[0]
    if bad.size:
        raise IntegrationBlowupError(
            f"covariance lost positive definiteness at t={times[bad[0]]:.6g}", times[bad[0]]
        )


def integrate_batch(A, W, X0, pieces, step_hint: float, record: bool = True):
    """Integrate a batch of RDEs over consecutive constant-information pieces.

    ``pieces`` is a sequence of ``(start, end, S)`` with ``S`` of shape
    ``(B, n, n)``; steps land exactly on every piece boundary.  Returns
    ``(times, states)`` with ``states`` of shape ``(K, B, n, n)`` (only the
    final state when ``record`` is false).
    """
    if step_hint <= 0:
        raise ValueError("step_hint must be positive")
    X = np.array(X0, dtype=float)
    times_out = []
    states_out = []
    t_first = None
    for start, end, S in pieces:
        if t_first is None:
            t_first = start
            if record:
                times_out.append(np.array([start]))
                states_out.append(X[None].copy())
        nsteps = segment_steps(end - start, step_hint)
        h = (end - start) / nsteps
        if record:
            buf = np.empty((nsteps,) + X.shape)
            X = rk4_steps(A, W, S, X, h, nsteps, buf)
            ts = start + h * np.arange(1, nsteps + 1)
            ts[-1] = end
            _check_pd(buf.reshape((nsteps * X.shape[0],) + X.shape[1:]), np.repeat(ts, X.shape[0]))
            times_out.append(ts)
            states_out.append(buf)
        else:
            X = rk4_steps(A, W, S, X, h, nsteps)
            _check_pd(X, np.full(X.shape[0], end))
    if not record:
        return None, X
    if not times_out:
        return np.zeros(0), np.zeros((0,) + X.shape)
    return np.concatenate(times_out), np.concatenate(states_out)


def integrate_rde(A, W, info: PiecewiseConstantInformation, Sigma_start, t_span, step_hint: float,
                  system_index: int = 0) -> CovarianceTrajectory:
    """RK4 integration of the RDE with steps aligned to every information switch."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    X0 = _sym(np.atleast_2d(np.asarray(Sigma_start, dtype=float)))
    t0, t1 = map(float, t_span)
    pieces = ((lo, hi, S[None]) for lo, hi, S in info.segments(t0, t1))
    times, states = integrate_batch(A[None], W[None], X0[None], pieces, step_hint)
    if len(times) == 0:
        times, states = np.array([t0]), X0[None, None]
    return CovarianceTrajectory(times, states[:, 0], system_index)


def periodic_steady_state(A, W, info: PiecewiseConstantInformation, Sigma0, step_hint: float | None = None,
                          tol: float = 1e-9, max_cycles: int = MAX_CYCLES,
                          system_index: int = 0) -> CovarianceTrajectory:
    """One period of the limit cycle of the periodic RDE.

    Whole periods are integrated until the period-to-period change of the
    state sampled at cycle boundaries is below ``tol`` (max-abs norm); the
    following period is then returned.
    """
    if info.period is None:
        raise ValueError("periodic_steady_state needs a periodic information signal")
    eps = info.period
    if step_hint is None:
        step_hint = eps / 40.0
    A = np.atleast_2d(np.asarray(A, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    one_cycle = list(info.segments(0.0, eps))
    X = _sym(np.atleast_2d(np.asarray(Sigma0, dtype=float)))[None]
    for _ in range(max_cycles):
        pieces = ((lo, hi, S[None]) for lo, hi, S in one_cycle)
        _, X_next = integrate_batch(A[None], W[None], X, pieces, step_hint, record=False)
        change = float(np.max(np.abs(X_next - X)))
        X = X_next
        if change <= tol:
            pieces = ((lo, hi, S[None]) for lo, hi, S in one_cycle)
            times, states = integrate_batch(A[None], W[None], X, pieces, step_hint)
            return CovarianceTrajectory(times, states[:, 0], system_index)
    raise PeriodicNonConvergenceError(
        f"no periodic convergence after {max_cycles} periods (last change {change:.3e})"
    )
