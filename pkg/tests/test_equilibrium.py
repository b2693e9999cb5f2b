import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_state
from helpers import bisect
from rebatelab.contract import generator_F, payoff_increments, swap_makers, tie_symmetric, zero_z
from rebatelab.equilibrium import (
    ControlPair,
    EquilibriumNotFound,
    NoPositiveRoot,
    best_response_lambda,
    best_response_mu,
    deviation_gain,
    gamma_residual,
    iterated_best_response,
    nash_fixed_point,
    solve_symmetric_gamma,
    verify_nash,
)
from rebatelab.model import APPLE, JumpKind, MarketState, delta_g


def sym_state(rng, n=None):
    n = int(rng.integers(1, 300)) if n is None else n
    quote = APPLE.P0_star + rng.normal(0, 3)
    x4 = n * (APPLE.P0_star + rng.normal(0, 2))
    return MarketState(t=1.0, x1=float(rng.integers(0, 500)), x2=float(rng.integers(0, 500)),
                       x3=APPLE.P0_star + rng.normal(0, 4), x4=x4, x5=float(n), x6=x4,
                       x7=float(n), p_p=quote, p_q=quote, r1=1.0, r2=1.0)


def valid_u(rng, state):
    dg = payoff_increments("p", state, APPLE)
    u = rng.uniform(0.5, 19.5, 7)
    u[0] = max(dg[0], 0) + rng.uniform(1, 10)
    u[1] = max(dg[1], 0) + rng.uniform(1, 10)
    return u


class TestBestResponseLambda:
    def test_anchor(self):
        assert best_response_lambda("p", make_state(), 0.0, APPLE) == pytest.approx(APPLE.lambda0)

    def test_clips(self, monkeypatch):
        import rebatelab.equilibrium as eq
        monkeypatch.setattr(eq, "delta_g", lambda *a: -80.0)
        assert best_response_lambda("p", make_state(), -30.0, APPLE) == 0.0
        monkeypatch.setattr(eq, "delta_g", lambda *a: 80.0)
        assert best_response_lambda("p", make_state(), 50.0, APPLE) == 200.0

    @given(z1=st.floats(-300, 300), z2=st.floats(-300, 300))
    def test_monotone_in_z(self, z1, z2):
        s = make_state(x4=5 * 185.0, x5=5.0, x1=3.0, p_p=186.0)
        lo, hi = sorted((z1, z2))
        assert best_response_lambda("p", s, lo, APPLE) <= best_response_lambda("p", s, hi, APPLE)

    def test_is_grid_argmax_of_F(self, rng):
        s = sym_state(rng)
        z = tie_symmetric(valid_u(rng, s))
        ctl = nash_fixed_point(s, z, APPLE)
        grid = np.arange(0, APPLE.lambda_inf + 1e-9, 0.1)
        vals = generator_F("p", s, z, ctl.mu_p, grid, ctl.mu_q, ctl.lam_q, 0.0, APPLE)
        assert abs(grid[np.argmax(vals)] - ctl.lam_p) <= 0.1 + 1e-12


class TestGamma:
    def test_ratio_four(self):
        assert solve_symmetric_gamma(-2.0, -0.5, 0.0, 1.76, 0.1) == pytest.approx(2.0, rel=1e-14)

    def test_symmetric(self):
        g = solve_symmetric_gamma(-1.0, -1.0, 0.0, 1.76, 0.1)
        assert g == pytest.approx(1.0, rel=1e-14)
        assert math.log(g) / 0.1 == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("a1, a2", [(1.0, -1.0), (-1.0, 0.0), (0.5, 0.5)])
    def test_invalid(self, a1, a2):
        with pytest.raises(NoPositiveRoot):
            solve_symmetric_gamma(a1, a2, 0.3, 1.76, 0.1)

    @given(a1=st.floats(-1e3, -1e-3), a2=st.floats(-1e3, -1e-3), zt=st.floats(-200, 200),
           c=st.floats(0.01, 2.0))
    def test_bisection_and_residual(self, a1, a2, zt, c):
        g = solve_symmetric_gamma(a1, a2, zt, 1.76, c)
        f = lambda x: -zt / 1.76 - c * a1 / x + c * a2 * x  # noqa: E731
        ref = bisect(f, 1e-12, 1e12)
        assert g == pytest.approx(ref, rel=1e-9)
        scale = abs(zt / 1.76) + abs(c * a1 / g) + abs(c * a2 * g)
        assert abs(gamma_residual(g, a1, a2, zt, 1.76, c)) <= 1e-10 * scale


class TestNash:
    def test_zero_contract_at_empty_state_fails(self):
        s = make_state()
        dg1 = delta_g("p", s, JumpKind.BUYER, APPLE)
        dg2 = delta_g("p", s, JumpKind.SELLER, APPLE)
        assert not (dg1 < 0 and dg2 < 0)
        with pytest.raises(EquilibriumNotFound) as info:
            nash_fixed_point(s, zero_z(), APPLE)
        assert info.value.dg1_plus_z1 == pytest.approx(dg1)

    def test_balanced_contract_gives_zero_spread(self, rng):
        s = sym_state(rng)
        dg = payoff_increments("p", s, APPLE)
        u = np.array([dg[0] + 3.0, dg[1] + 3.0, 1.0, 2.0, 0.0, 4.0, 0.0])
        ctl = nash_fixed_point(s, tie_symmetric(u), APPLE)
        assert ctl.gamma == pytest.approx(1.0, rel=1e-12)
        assert ctl.mu_p == pytest.approx(0.0, abs=1e-12) and ctl.mu_q == ctl.mu_p
        assert ctl.lam_p == pytest.approx(best_response_lambda("p", s, 2.0, APPLE))
        assert ctl.lam_q == pytest.approx(best_response_lambda("q", s, 2.0, APPLE))

    def test_invariants(self, rng):
        for _ in range(30):
            s = sym_state(rng)
            ctl = nash_fixed_point(s, tie_symmetric(valid_u(rng, s)), APPLE)
            assert abs(ctl.mu_p) <= APPLE.mu_inf and 0 <= ctl.lam_p <= APPLE.lambda_inf
            if not ctl.clipped["mu_p"]:
                assert ctl.mu_p + ctl.mu_q == pytest.approx(math.log(ctl.gamma) / APPLE.c, abs=1e-10)

    def test_foc_residual(self, rng):
        # unclipped spread zeroes the derivative of F^p in its own spread
        for _ in range(30):
            s = sym_state(rng)
            z = tie_symmetric(valid_u(rng, s))
            ctl = nash_fixed_point(s, z, APPLE)
            h = 1e-6
            f = lambda m: generator_F("p", s, z, m, ctl.lam_p, ctl.mu_q, ctl.lam_q, 0.0, APPLE)  # noqa: E731
            deriv = (f(ctl.mu_p + h) - f(ctl.mu_p - h)) / (2 * h)
            assert abs(deriv) < 1e-5 * max(1.0, abs(f(ctl.mu_p)))

    def test_verify_passes(self, rng):
        for _ in range(20):
            s = sym_state(rng)
            z = tie_symmetric(valid_u(rng, s))
            assert verify_nash(s, z, nash_fixed_point(s, z, APPLE), APPLE, grid_step=0.02, tol=1e-3)

    def test_spread_perturbation_detected(self, rng):
        s = sym_state(rng)
        z = tie_symmetric(valid_u(rng, s))
        ctl = nash_fixed_point(s, z, APPLE)
        bad = ControlPair(ctl.mu_p + 1.0, ctl.mu_q, ctl.lam_p, ctl.lam_q)
        assert not verify_nash(s, z, bad, APPLE, grid_step=0.01, tol=1e-3)

    def test_lambda_perturbation_detected(self, rng):
        s = sym_state(rng)
        u = valid_u(rng, s)
        u[3] = u[5] = 5.0
        z = tie_symmetric(u)
        ctl = nash_fixed_point(s, z, APPLE)
        assert 1 < ctl.lam_p < APPLE.lambda_inf - 1
        for delta in (-1.0, 1.0, 3.5):
            bad = ControlPair(ctl.mu_p, ctl.mu_q, ctl.lam_p + delta, ctl.lam_q)
            assert not verify_nash(s, z, bad, APPLE, grid_step=0.01, tol=1e-6)

    def test_grid_step_must_be_positive(self, rng):
        s = sym_state(rng)
        z = tie_symmetric(valid_u(rng, s))
        with pytest.raises(ValueError):
            verify_nash(s, z, nash_fixed_point(s, z, APPLE), APPLE, grid_step=0.0)

    def test_swap_symmetry(self, rng):
        s = sym_state(rng)
        z = tie_symmetric(valid_u(rng, s))
        s2, z2 = swap_makers(s, z)
        a, b = nash_fixed_point(s, z, APPLE), nash_fixed_point(s2, z2, APPLE)
        assert (a.mu_p, a.lam_p) == pytest.approx((b.mu_q, b.lam_q))

    def test_fee_enters_through_intensity_scale(self, rng):
        s = sym_state(rng)
        z = tie_symmetric(valid_u(rng, s))
        for d in (0.0, 1.5, 4.0):
            ctl = nash_fixed_point(s, z, APPLE, d=d)
            assert deviation_gain("p", s, z, ctl, APPLE, d=d) <= 1e-3


class TestIteratedBestResponse:
    def test_agrees_with_closed_form_total_spread(self, rng):
        for _ in range(10):
            s = sym_state(rng)
            z = tie_symmetric(valid_u(rng, s))
            ctl = nash_fixed_point(s, z, APPLE)
            ibr = iterated_best_response(s, z, APPLE)
            if not ctl.clipped["mu_p"]:
                assert ibr.mu_p + ibr.mu_q == pytest.approx(ctl.mu_p + ctl.mu_q, abs=1e-6)
            assert ibr.lam_p == pytest.approx(ctl.lam_p)

    def test_best_response_mu_is_grid_max(self, rng):
        s = sym_state(rng)
        z = tie_symmetric(valid_u(rng, s))
        br = best_response_mu("p", s, z, 0.7, APPLE)
        grid = np.arange(-APPLE.mu_inf, APPLE.mu_inf + 1e-9, 0.01)
        vals = generator_F("p", s, z, grid, 100.0, 0.7, 100.0, 0.0, APPLE)
        best = generator_F("p", s, z, br, 100.0, 0.7, 100.0, 0.0, APPLE)
        assert best >= vals.max() - 1e-9
