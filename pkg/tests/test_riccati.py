import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sensorsched.errors import (
    DegenerateSensorError,
    IntegrationBlowupError,
    NoStabilizingSolutionError,
    SingularSylvesterError,
)
from sensorsched.riccati import (
    PiecewiseConstantInformation,
    care_residual,
    integrate_rde,
    periodic_steady_state,
    relative_care_residual,
    scalar_riccati_roots,
    solve_care,
    solve_lyapunov,
    write_trajectories_csv,
)

from . import oracles

X2 = 2.0 + math.sqrt(5.0)


def _random_instance(rng, n):
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, n))
    W = B @ B.T + 0.1 * np.eye(n)
    m = int(rng.integers(1, n + 1))
    C = rng.normal(size=(m, n))
    return A, C.T @ C, W


# --------------------------------------------------------------------------
# Lyapunov


def test_lyapunov_scalar():
    assert solve_lyapunov(-1.0, 1.0)[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_lyapunov_passive_equilibrium_of_stable_site():
    # the stable mirror of A = 0.1 has passive equilibrium W/(2*0.1)
    assert solve_lyapunov(-0.1, 1.0)[0, 0] == pytest.approx(5.0, rel=1e-14)


def test_lyapunov_decoupled():
    np.testing.assert_allclose(solve_lyapunov(-np.eye(2), np.eye(2)), 0.5 * np.eye(2), atol=1e-15)


def test_lyapunov_singular():
    with pytest.raises(SingularSylvesterError):
        solve_lyapunov(np.array([[1.0, 0.0], [0.0, -1.0]]), np.eye(2))
    with pytest.raises(SingularSylvesterError):
        solve_lyapunov(0.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_lyapunov_residual_and_oracle(seed, n):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(n, n)) - (n + 1) * np.eye(n)
    B = rng.normal(size=(n, n))
    Q = B @ B.T
    X = solve_lyapunov(F, Q)
    res = np.abs(F @ X + X @ F.T + Q).max()
    assert res <= 1e-9 * (1 + np.abs(Q).max())
    np.testing.assert_array_equal(X, X.T)
    np.testing.assert_allclose(X, oracles.lyapunov(F, Q), atol=1e-10 * (1 + np.abs(X).max()))


# --------------------------------------------------------------------------
# CARE


@pytest.mark.parametrize(
    "A, expected",
    [(2.0, X2), (0.1, 0.1 + math.sqrt(1.01))],
)
def test_care_scalar_examples(A, expected):
    oracle = oracles.bisect(lambda x: 2 * A * x + 1 - x * x, 0.0, 10.0)
    assert oracle == pytest.approx(expected, rel=1e-12)
    assert solve_care(A, 1.0, 1.0)[0, 0] == pytest.approx(oracle, rel=1e-12)


def test_care_without_information_is_lyapunov():
    X = solve_care(-np.eye(2), np.zeros((2, 2)), np.eye(2))
    np.testing.assert_allclose(X, 0.5 * np.eye(2), atol=1e-14)


def test_care_undetectable():
    with pytest.raises(NoStabilizingSolutionError):
        solve_care(1.0, 0.0, 1.0)
    with pytest.raises(NoStabilizingSolutionError):
        solve_care(np.diag([1.0, -1.0]), np.diag([0.0, 1.0]), np.eye(2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_care_matches_scipy(seed, n):
    rng = np.random.default_rng(seed)
    A, S, W = _random_instance(rng, n)
    X = solve_care(A, S, W)
    ref = oracles.care(A, S, W)
    np.testing.assert_allclose(X, ref, atol=1e-8 * (1 + np.abs(ref).max()))
    assert relative_care_residual(A, S, W, X) <= 1e-9
    assert np.max(np.linalg.eigvals(A - X @ S).real) < 0
    assert np.linalg.eigvalsh(X).min() > 0


def test_care_is_minimal_solution_of_inequality():
    # any PD Sigma with A S + S A^T + W - S Info S <= 0 dominates the stabilizing root
    rng = np.random.default_rng(5)
    for _ in range(20):
        A, S, W = _random_instance(rng, 3)
        X = solve_care(A, S, W)
        for _ in range(5):
            B = rng.normal(size=(3, 3))
            Y = X + 0.1 * B @ B.T
            if np.linalg.eigvalsh(care_residual(A, S, W, Y)).max() <= 0:
                assert np.linalg.eigvalsh(Y - X).min() >= -1e-10


def test_scalar_riccati_roots_examples():
    r = math.sqrt(5.0)
    np.testing.assert_allclose(scalar_riccati_roots(2.0, 1.0, 1.0, 1.0), (2 - r, 2 + r), rtol=1e-13)
    np.testing.assert_allclose(scalar_riccati_roots(0.0, 1.0, 1.0, 1.0), (-1.0, 1.0), rtol=1e-15)
    r3 = math.sqrt(3.0)
    lo = oracles.bisect(lambda x: -2 * x + 2 - x * x, -5.0, 0.0)
    hi = oracles.bisect(lambda x: -2 * x + 2 - x * x, 0.0, 5.0)
    x1, x2 = scalar_riccati_roots(-1.0, 1.0, 1.0, 2.0)
    assert (x1, x2) == pytest.approx((-1 - r3, -1 + r3), rel=1e-13)
    assert (x1, x2) == pytest.approx((lo, hi), rel=1e-12)


def test_scalar_riccati_roots_degenerate():
    with pytest.raises(DegenerateSensorError):
        scalar_riccati_roots(1.0, 0.0, 1.0, 1.0)


# --------------------------------------------------------------------------
# RDE integration


def test_rde_linear_decay():
    info = PiecewiseConstantInformation.constant(0.0)
    tr = integrate_rde(-1.0, 0.0, info, 3.0, (0.0, 1.0), 1e-3)
    assert tr.final[0, 0] == pytest.approx(3 * math.exp(-2.0), rel=1e-11)
    assert tr.final[0, 0] == pytest.approx(0.4060058, abs=1e-7)


def test_rde_stays_at_equilibrium():
    info = PiecewiseConstantInformation.constant(1.0)
    tr = integrate_rde(2.0, 1.0, info, X2, (0.0, 5.0), 1e-2)
    assert np.abs(tr.covariances[:, 0, 0] - X2).max() <= 1e-12


def test_rde_converges_to_care():
    info = PiecewiseConstantInformation.constant(1.0)
    tr = integrate_rde(2.0, 1.0, info, 1.0, (0.0, 5.0), 1e-2)
    assert abs(tr.final[0, 0] - solve_care(2.0, 1.0, 1.0)[0, 0]) <= 1e-6


def test_rde_matches_adaptive_integrator():
    rng = np.random.default_rng(11)
    A, S, W = _random_instance(rng, 3)
    X0 = np.eye(3)
    info = PiecewiseConstantInformation.constant(S)
    tr = integrate_rde(A, W, info, X0, (0.0, 2.0), 1e-3)
    np.testing.assert_allclose(tr.final, oracles.rde_endpoint(A, W, S, X0, 2.0), atol=1e-9)


def test_rde_lands_on_breakpoints():
    info = PiecewiseConstantInformation([0.0, 0.013, 0.07], [1.0, 0.0, 2.0], 0.1)
    tr = integrate_rde(1.0, 1.0, info, 1.0, (0.0, 0.35), 0.01)
    for k in range(4):
        for bp in info.breakpoints:
            t = k * 0.1 + bp
            if t <= 0.35:
                assert np.min(np.abs(tr.times - t)) <= 1e-12
    assert np.all(np.diff(tr.times) > 0)


def test_rde_piecewise_matches_adaptive_integrator():
    info = PiecewiseConstantInformation([0.0, 0.3], [1.0, 0.0], 1.0)
    tr = integrate_rde(0.5, 1.0, info, 2.0, (0.0, 1.0), 1e-3)
    mid = oracles.rde_endpoint(np.array([[0.5]]), np.eye(1), np.eye(1), np.array([[2.0]]), 0.3)
    end = oracles.rde_endpoint(np.array([[0.5]]), np.eye(1), np.zeros((1, 1)), mid, 0.7)
    assert tr.final[0, 0] == pytest.approx(end[0, 0], rel=1e-10)


def test_rde_blowup_is_reported_with_time():
    # a negative information weight drives the variance to infinity in finite time
    info = PiecewiseConstantInformation.constant(-1.0)
    with pytest.raises(IntegrationBlowupError) as exc, np.errstate(all="ignore"):
        integrate_rde(0.0, 1.0, info, 1.0, (0.0, 10.0), 1e-2)
    assert exc.value.time is not None and 0 < exc.value.time <= 10


def test_rk4_fourth_order():
    A, W, S = np.array([[0.5]]), np.eye(1), np.eye(1)
    ref = oracles.rde_endpoint(A, W, S, np.array([[0.2]]), 1.0)[0, 0]
    info = PiecewiseConstantInformation.constant(S)
    errs = [
        abs(integrate_rde(A, W, info, 0.2, (0.0, 1.0), h).final[0, 0] - ref) for h in (0.1, 0.05)
    ]
    assert errs[0] / errs[1] >= 12


def test_jensen_on_trajectory():
    info = PiecewiseConstantInformation([0.0, 0.05], [np.diag([1.0, 0.2]), np.zeros((2, 2))], 0.1)
    A = np.array([[0.3, 1.0], [-0.5, 0.1]])
    tr = integrate_rde(A, np.eye(2), info, np.eye(2), (0.0, 3.0), 1e-3)
    mean = tr.covariances.mean(axis=0)
    inv_mean = np.linalg.inv(np.mean([np.linalg.inv(X) for X in tr.covariances], axis=0))
    assert np.linalg.eigvalsh(mean - inv_mean).min() >= -1e-12


def test_information_signal_validation():
    with pytest.raises(ValueError):
        PiecewiseConstantInformation([0.0, 0.2, 0.1], [1.0, 0.0, 1.0], 1.0)
    with pytest.raises(ValueError):
        PiecewiseConstantInformation([0.1], [1.0], 1.0)
    with pytest.raises(ValueError):
        PiecewiseConstantInformation([0.0, 0.5], [1.0, 0.0], 0.5)


# --------------------------------------------------------------------------
# periodic steady state


def test_periodic_constant_signal_gives_care():
    info = PiecewiseConstantInformation([0.0], [1.0], 0.1)
    orbit = periodic_steady_state(2.0, 1.0, info, 1.0)
    assert np.abs(orbit.covariances[:, 0, 0] - X2).max() <= 1e-8


def test_periodic_orbit_is_periodic_and_close_to_averaged_care():
    p2 = 0.77
    eps = 0.05
    info = PiecewiseConstantInformation([0.0, (1 - p2) * eps], [0.0, 1.0], eps)
    orbit = periodic_steady_state(2.0, 1.0, info, 1.0)
    values = orbit.covariances[:, 0, 0]
    assert abs(values[0] - values[-1]) <= 1e-8
    averaged = solve_care(2.0, p2, 1.0)[0, 0]
    sup_gap, mean_gap = [], []
    for e in (eps, eps / 2):
        inf = PiecewiseConstantInformation([0.0, (1 - p2) * e], [0.0, 1.0], e)
        orb = periodic_steady_state(2.0, 1.0, inf, 1.0)
        v, t = orb.covariances[:, 0, 0], orb.times
        sup_gap.append(np.abs(v - averaged).max())
        mean_gap.append(abs(np.trapezoid(v, t) / (t[-1] - t[0]) - averaged))
    # the orbit stays within O(eps) of the averaged solution
    assert sup_gap[0] < 0.5
    assert sup_gap[1] <= 0.65 * sup_gap[0]
    # its time average is even closer (the first-order term averages out)
    assert mean_gap[1] <= 0.35 * mean_gap[0]


def test_periodic_orbit_bracketed_by_fixed_points():
    info = PiecewiseConstantInformation([0.0, 0.05], [0.0, 1.0], 0.1)
    orbit = periodic_steady_state(-1.0, 1.0, info, 1.0)
    values = orbit.covariances[:, 0, 0]
    lyap = solve_lyapunov(-1.0, 1.0)[0, 0]
    are = solve_care(-1.0, 1.0, 1.0)[0, 0]
    assert are < values.min() and values.max() < lyap


def test_trajectory_csv(tmp_path):
    info = PiecewiseConstantInformation.constant(np.eye(2))
    tr = integrate_rde(-np.eye(2), np.eye(2), info, np.eye(2), (0.0, 0.1), 0.05)
    path = tmp_path / "tr.csv"
    write_trajectories_csv(path, [tr])
    lines = path.read_text().splitlines()
    assert lines[0] == "t,system,s_00,s_01,s_10,s_11,active_sensor"
    assert len(lines) == len(tr) + 1
