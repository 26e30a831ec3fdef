import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from orbitroa import models
from orbitroa import odeflow as od
from orbitroa import periodic_lyap as pl
from orbitroa import transverse as tv


def const_ltv(a, T=1.0, K=33, b=None, A_d=None):
    """Scalar LTV fixture with constant A (and B) and optional single impact."""
    taus = np.linspace(0, T, K)
    A = np.full((K, 1, 1), float(a))
    m = 1 if b is not None else 0
    B = np.full((K, 1, 1), float(b)) if b is not None else np.zeros((K, 1, 0))
    return tv.TransverseLTV(
        n=2, m=m, T=T, taus=[taus], A=[A], B=[B],
        A_d=[] if A_d is None else [np.array([[float(A_d)]])], phases=[0],
    )


@pytest.fixture(scope="module")
def vdp_setup():
    mdl = models.van_der_pol()
    orbit = od.find_orbit(mdl, [2.0, 0.0], 6.5)
    fam = tv.make_surfaces(orbit, mdl)
    ltv = tv.transverse_linearization(fam, orbit, mdl)
    return mdl, orbit, fam, ltv


@pytest.fixture(scope="module")
def wheel_setup():
    mdl = models.rimless_wheel()
    w = models.rimless_wheel_fixed_point()
    orbit = od.find_orbit(mdl, [models.WHEEL_GAMMA - models.WHEEL_ALPHA, 1.2 * w])
    fam = tv.make_surfaces(orbit, mdl)
    ltv = tv.transverse_linearization(fam, orbit, mdl)
    return mdl, orbit, fam, ltv


class TestPeriodicLyapunov:
    def test_scalar_steady_state(self):
        pq = pl.periodic_lyapunov(const_ltv(-1.0), Q=2.0)
        assert np.max(np.abs(pq.P[0] - 1.0)) <= 1e-10

    def test_unstable_rejected(self):
        with pytest.raises(pl.UnstableSystem):
            pl.periodic_lyapunov(const_ltv(1.0), Q=2.0)

    def test_vdp_residual_and_periodicity(self, vdp_setup):
        _, _, _, ltv = vdp_setup
        pq = pl.periodic_lyapunov(ltv, Q=1.0)
        assert pl.lyapunov_residual(ltv, pq) <= 1e-6
        assert np.linalg.norm(pq.P[0][0] - pq.P[0][-1]) <= 1e-8
        assert pq.min_eigenvalue() > 0

    def test_decrease_along_linearization(self, vdp_setup):
        # d/dt (x'Px) = -x'Qx along x' = A(t)x, by propagate-and-difference
        _, _, _, ltv = vdp_setup
        pq = pl.periodic_lyapunov(ltv, Q=1.0)
        rng = np.random.default_rng(11)
        for tau0 in (0.8, 3.1, 5.5):
            x0 = rng.uniform(0.5, 1.5, size=1)
            h = 1e-6

            def rhs(t, y):
                return ltv.A_at(0, t) @ y

            sol = solve_ivp(rhs, (tau0 - h, tau0 + h), x0, rtol=1e-12, atol=1e-14,
                            t_eval=[tau0 - h, tau0, tau0 + h])
            xs = sol.y.T
            vals = [
                float(x @ pq.P_at(t, 0) @ x)
                for x, t in zip(xs, [tau0 - h, tau0, tau0 + h])
            ]
            dV = (vals[2] - vals[0]) / (2 * h)
            expected = -float(xs[1] @ pq.Q @ xs[1])
            assert dV == pytest.approx(expected, rel=1e-5)

    def test_wrong_op_for_hybrid(self, wheel_setup):
        _, _, _, ltv = wheel_setup
        with pytest.raises(pl.LyapError):
            pl.periodic_lyapunov(ltv, Q=1.0)


class TestJumpLyapunov:
    def test_scalar_jump_fixed_point(self):
        a, q = 0.5, 2.0
        pq = pl.jump_lyapunov(const_ltv(0.0, A_d=a), Q=0.0, Qi=q)
        assert np.max(np.abs(pq.P[0] - q / (1 - a * a))) <= 1e-10

    def test_unit_jump_unstable(self):
        with pytest.raises(pl.UnstableSystem):
            pl.jump_lyapunov(const_ltv(0.0, A_d=1.0), Q=0.0, Qi=1.0)

    def test_wheel_sppd_and_jump_condition(self, wheel_setup):
        _, _, _, ltv = wheel_setup
        pq = pl.jump_lyapunov(ltv, Q=1.0, Qi=1.0)
        assert pl.lyapunov_residual(ltv, pq) <= 1e-6
        assert pq.min_eigenvalue() > 0
        A_d = ltv.A_d[0]
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(size=1)
            lhs = float(x @ pq.P[0][-1] @ x) - float((A_d @ x) @ pq.P[0][0] @ (A_d @ x))
            assert lhs == pytest.approx(float(x @ pq.Qi @ x), abs=1e-10)

    def test_wheel_V_decreases_across_simulated_impacts(self, wheel_setup):
        mdl, orbit, fam, ltv = wheel_setup
        pq = pl.jump_lyapunov(ltv, Q=1.0, Qi=1.0)
        x0 = tv.from_transverse(fam, orbit, [0.05], 0.3 * orbit.T)
        res = od.hybrid_flow(mdl, x0, 3.2 * orbit.T)
        assert len(res.impacts) >= 3
        for rec in res.impacts:
            xm = fam.segments[0].Pi[-1] @ (rec.x_pre - fam.segments[0].xs[-1])
            xp = fam.segments[0].Pi[0] @ (rec.x_post - fam.segments[0].xs[0])
            V_pre = float(xm @ pq.P[0][-1] @ xm)
            V_post = float(xp @ pq.P[0][0] @ xp)
            assert V_post <= V_pre


class TestJumpRiccati:
    def test_scalar_algebraic_riccati(self):
        pq, gain = pl.jump_riccati(const_ltv(0.0, b=1.0), Q=1.0, Qi=1.0, R=1.0)
        assert np.max(np.abs(pq.P[0] - 1.0)) <= 1e-8
        assert np.max(np.abs(gain.K[0] - 1.0)) <= 1e-8

    def test_unstabilizable_rejected(self):
        with pytest.raises(pl.NoConvergence):
            pl.jump_riccati(const_ltv(1.0, b=0.0), Q=1.0, R=1.0, max_cycles=60)

    def test_no_inputs_rejected(self, vdp_setup):
        _, _, _, ltv = vdp_setup
        with pytest.raises(pl.LyapError, match="no inputs"):
            pl.jump_riccati(ltv, Q=1.0, R=1.0)

    def test_reversed_vdp_stabilized(self):
        mdl = models.van_der_pol_reversed()
        orbit = od.find_orbit(mdl, [2.0, 0.0], 6.5)
        fam = tv.make_surfaces(orbit, mdl)
        ltv = tv.transverse_linearization(fam, orbit, mdl)
        rho_open = np.max(np.abs(np.linalg.eigvals(tv.transverse_monodromy(ltv))))
        assert rho_open > 1.0
        pq, gain = pl.jump_riccati(ltv, Q=1.0, R=1.0)
        assert pl.closed_loop_spectral_radius(ltv, gain) < 1.0
        assert pq.min_eigenvalue() > 0

    def test_optimality_stationarity(self):
        # perturbing the gain leaves the one-period cost (with the Riccati
        # solution as terminal cost) stationary to first order
        ltv = const_ltv(0.3, T=2.0, K=65, b=1.0)
        pq, gain = pl.jump_riccati(ltv, Q=1.0, Qi=1.0, R=1.0, tol=1e-10)
        x0 = np.array([0.7])
        P0 = pq.P[0][0]

        def cost(eps):
            def rhs(t, y):
                x = y[:1]
                K = gain.K_at(t, 0) + eps * np.array([[1.0]])
                u = -K @ x
                dx = ltv.A_at(0, t) @ x + ltv.B_at(0, t) @ u
                dc = float(x @ x) + float(u @ u)
                return np.concatenate([dx, [dc]])

            sol = solve_ivp(rhs, (0, ltv.T), np.concatenate([x0, [0.0]]),
                            rtol=1e-13, atol=1e-15)
            xT = sol.y[:1, -1]
            return sol.y[1, -1] + float(xT @ P0 @ xT)

        eps = 1e-2
        J0, Jp, Jm = cost(0.0), cost(eps), cost(-eps)
        Jp2, Jm2 = cost(eps / 2), cost(-eps / 2)
        assert Jp > J0 and Jm > J0  # cost increases either way
        # Richardson-extract the first-order coefficient: central differences
        # at eps and eps/2 cancel the cubic term that otherwise dominates
        f_eps = (Jp - Jm) / 2
        f_half = (Jp2 - Jm2) / 2
        first = abs((8 * f_half - f_eps) / 3)
        second = abs(Jp + Jm - 2 * J0) / 2
        assert second > 0
        assert first <= 1e-4 * second


class TestBisectLevel:
    def test_threshold_verifier(self):
        rho = pl.bisect_level(lambda r: r <= 0.37, 1e-3, 10.0)
        assert 0.3663 <= rho <= 0.37

    def test_always_true_returns_max(self):
        assert pl.bisect_level(lambda r: True, 1e-3, 10.0) == 10.0

    def test_fails_at_min(self):
        with pytest.raises(pl.LyapError):
            pl.bisect_level(lambda r: False, 1e-3, 10.0)


class TestSerialization:
    def test_quadratic_roundtrip(self, vdp_setup):
        _, _, _, ltv = vdp_setup
        pq = pl.periodic_lyapunov(ltv, Q=1.0)
        obj = pl.quadratic_to_json(pq)
        back = pl.quadratic_from_json(obj)
        assert np.array_equal(back.P[0], pq.P[0])
        assert np.array_equal(back.Q, pq.Q)

    def test_gain_roundtrip(self):
        ltv = const_ltv(0.0, b=1.0)
        _, gain = pl.jump_riccati(ltv, Q=1.0, R=1.0)
        back = pl.gain_from_json(pl.gain_to_json(gain))
        assert np.array_equal(back.K[0], gain.K[0])
