"""Closed-form Whittle indices and dual bound for scalar sites with identical sensors.

Each site has variance dynamics ``dS/dt = 2 A S + W - pi (C^2/V) S^2`` and cost
rate ``T S + kappa pi``.  For a measurement tax ``lam`` the optimal single-site
policy is a threshold policy; inverting the threshold gives the index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import IndexDegenerateError, StructuralError, UnboundedDualError
from .model import Mode, SchedulingProblem
from .riccati import scalar_riccati_roots

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ScalarSite:
    A: float
    C: float = 1.0
    V: float = 1.0
    W: float = 1.0
    T_weight: float = 1.0
    kappa: float = 0.0

    def __post_init__(self):
        if not self.W > 0:
            raise StructuralError("scalar site needs W > 0")
        if not self.V > 0:
            raise StructuralError("scalar site needs V > 0")
        if self.T_weight < 0 or self.kappa < 0:
            raise StructuralError("scalar site needs T >= 0 and kappa >= 0")

    @property
    def degenerate(self) -> bool:
        """Index is the constant -kappa (no sensor information or no error weight)."""
        return self.C == 0 or self.T_weight == 0

    @property
    def roots(self) -> tuple[float, float]:
        return scalar_riccati_roots(self.A, self.C, self.V, self.W)

    @property
    def x1(self) -> float:
        return self.roots[0]

    @property
    def x2(self) -> float:
        return self.roots[1]

    @property
    def x_e(self) -> float:
        """Passive equilibrium -W/(2A) for stable sites, +inf otherwise."""
        return -self.W / (2.0 * self.A) if self.A < 0 else math.inf

    @property
    def gain(self) -> float:
        return self.C * self.C / self.V


def sites_from_problem(problem: SchedulingProblem) -> list[ScalarSite]:
    """Scalar sites of a problem whose sensors are identical per site."""
    sites = []
    for i, (system, row) in enumerate(zip(problem.systems, problem.links)):
        if system.n != 1:
            raise StructuralError(f"system {i} is not scalar")
        first = row[0]
        for j, link in enumerate(row):
            if link.C.shape != (1, 1) or (link.C[0, 0], link.V[0, 0], link.kappa) != (
                first.C[0, 0], first.V[0, 0], first.kappa
            ):
                raise StructuralError(f"link ({i},{j}) differs from link ({i},0); sensors must be identical")
        sites.append(
            ScalarSite(
                A=float(system.A[0, 0]),
                C=float(first.C[0, 0]),
                V=float(first.V[0, 0]),
                W=float(system.W[0, 0]),
                T_weight=float(system.T_weight[0, 0]),
                kappa=first.kappa,
            )
        )
    return sites


def whittle_index(site: ScalarSite, Sigma):
    """Whittle index at variance ``Sigma`` (scalar or array, Sigma >= 0)."""
    S = np.asarray(Sigma, dtype=float)
    if site.degenerate:
        out = np.full(S.shape, -site.kappa)
        return float(out) if out.ndim == 0 else out
    T, A, W, k = site.T_weight, site.A, site.W, site.kappa
    x1, x2 = site.roots
    xe = site.x_e
    with np.errstate(divide="ignore", invalid="ignore"):
        low = T * S * S / (S - x1)
        mid = 0.5 * site.gain * T * S**3 / (A * S + W)
        high = T * site.gain * S * S / (2.0 * abs(A)) if A < 0 else np.inf
    out = np.where(S <= x2, low, np.where(S < xe, mid, high)) - k
    return float(out) if out.ndim == 0 else out


def _cubic_root(site: ScalarSite, lam: float, lo: float, hi: float) -> float:
    """Unique positive root of X^3 - a A X - a W = 0 with a = 2V(lam+kappa)/(T C^2)."""
    a = 2.0 * site.V * (lam + site.kappa) / (site.T_weight * site.C**2)
    upper = max(1.0, 2.0 * (a * site.W) ** (1.0 / 3.0) + 2.0 * abs(site.A) * a)

    def f(x):
        return x**3 - a * site.A * x - a * site.W

    hi = min(hi, upper)
    lo = max(lo, 0.0)
    if f(lo) > 0:
        lo = 0.0
    while f(hi) < 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def threshold(site: ScalarSite, lam: float) -> float:
    """Boundary of the passive region [0, threshold] for measurement tax ``lam``."""
    if site.degenerate:
        raise IndexDegenerateError("threshold undefined when C = 0 or T = 0")
    if lam <= -site.kappa:
        return 0.0
    x1, x2 = site.roots
    xe = site.x_e
    if lam <= whittle_index(site, x2):
        r = (site.kappa + lam) / site.T_weight
        return 0.5 * (r + math.sqrt(r * (r - 4.0 * x1)))
    if math.isfinite(xe) and lam >= whittle_index(site, xe):
        return math.sqrt(2.0 * abs(site.A) * site.V * (lam + site.kappa) / site.T_weight) / abs(site.C)
    return _cubic_root(site, lam, x2, xe)


def _site_dual_and_fraction(site: ScalarSite, lam: float) -> tuple[float, float]:
    T, k = site.T_weight, site.kappa
    if T == 0:
        return min(lam + k, 0.0), (1.0 if lam + k < 0 else 0.0)
    if site.C == 0:
        if site.A >= 0:
            return math.inf, 1.0
        return T * site.x_e + min(lam + k, 0.0), (1.0 if lam + k < 0 else 0.0)
    x2, xe = site.x2, site.x_e
    if lam <= whittle_index(site, x2):
        return T * x2 + k + lam, 1.0
    if math.isfinite(xe) and lam >= whittle_index(site, xe):
        return T * xe, 0.0
    s = threshold(site, lam)
    frac = site.V * (2.0 * site.A * s + site.W) / (site.C**2 * s * s)
    return T * s + (k + lam) * frac, frac


def site_dual(site: ScalarSite, lam: float) -> float:
    """Optimal single-site average cost with measurement tax ``lam`` (may be +inf)."""
    return _site_dual_and_fraction(site, lam)[0]


def active_fraction(site: ScalarSite, lam: float) -> float:
    """Long-run fraction of time the site is measured by the optimal threshold policy."""
    return _site_dual_and_fraction(site, lam)[1]


@dataclass(frozen=True)
class ScalarDualResult:
    lambda_star: float
    gamma_star: float
    site_gammas: tuple
    fractions: tuple

    def __iter__(self):
        return iter((self.lambda_star, self.gamma_star))


def dual_value(sites: Sequence[ScalarSite], M: int, lam: float) -> float:
    return sum(site_dual(s, lam) for s in sites) - lam * M


def scalar_dual_bound(sites: Sequence[ScalarSite], M: int, mode: str | Mode = "at-most-one",
                      tol: float = 1e-12) -> ScalarDualResult:
    """Maximize the concave dual over the single measurement multiplier.

    Equality mode lets the multiplier go negative (down to ``-max kappa``,
    below which the dual is increasing); inequality mode keeps it
    nonnegative.
    """
    mode = Mode.parse(mode)
    for i, s in enumerate(sites):
        if s.C == 0 and s.A >= 0 and s.T_weight > 0:
            raise UnboundedDualError(f"site {i} is unstable and unobservable")
    lo = 0.0 - max(s.kappa for s in sites)
    if mode is Mode.AT_MOST_ONE:
        lo = max(lo, 0.0)

    def supergradient(lam):
        return sum(active_fraction(s, lam) for s in sites) - M

    def value(lam):
        return dual_value(sites, M, lam)

    if supergradient(lo) <= 0:
        best = lo
    else:
        width = 1.0
        while supergradient(lo + width) > 0:
            width *= 2.0
            if width > 1e15:
                raise UnboundedDualError("dual keeps increasing; no finite maximizer")
        a, b = lo, lo + width
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        fc, fd = value(c), value(d)
        while b - a > tol * (1.0 + abs(a) + abs(b)):
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - GOLDEN * (b - a)
                fc = value(c)
            else:
                a, c, fc = c, d, fd
                d = a + GOLDEN * (b - a)
                fd = value(d)
        best = 0.5 * (a + b)
    gammas = tuple(site_dual(s, best) for s in sites)
    fracs = tuple(active_fraction(s, best) for s in sites)
    return ScalarDualResult(best, sum(gammas) - best * M, gammas, fracs)


def whittle_policy_step(sites: Sequence[ScalarSite], Sigmas: Sequence[float], M: int,
                        skip_negative: bool = False) -> list[int]:
    """Indices of the ``M`` sites with highest Whittle index (ties: lowest index).

    With ``skip_negative`` sites whose index is negative are left unmeasured
    (measuring them is not worth it even at zero tax).
    """
    if len(Sigmas) != len(sites):
        raise StructuralError("one variance per site required")
    scores = [whittle_index(s, x) for s, x in zip(sites, Sigmas)]
    order = sorted(range(len(sites)), key=lambda i: (-scores[i], i))
    chosen = order[:M]
    if skip_negative:
        chosen = [i for i in chosen if scores[i] >= 0]
    return sorted(chosen)
