import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_state
from rebatelab.contract import (
    exchange_objective,
    generator_F,
    is_symmetric,
    payoff_increments,
    step_Y,
    swap_makers,
    tie_symmetric,
    trader_value_V0,
    untie_symmetric_grad,
    zero_z,
)
from rebatelab.equilibrium import nash_fixed_point
from rebatelab.model import APPLE, ModelParams, investor_intensities
from rebatelab.simulation import ConstantPolicy, PathBatch, simulate_batch

small = APPLE.with_(n_steps=5)


def F_by_hand(maker, state, z, mu_p, lam_p, mu_q, lam_q, d, params):
    col = 0 if maker == "p" else 1
    dg = payoff_increments(maker, state, params)
    la, lb = investor_intensities(mu_p, mu_q, d, params)
    own = lam_p if maker == "p" else lam_q
    L0 = params.lambda0
    total = -0.5 * (own - L0) ** 2
    total += dg[0] * la + dg[1] * lb + dg[2] * lam_p + dg[3] * lam_q
    total -= z[0, col] * (L0 - la) + z[1, col] * (L0 - lb)
    total -= z[3, col] * (L0 - lam_p) + z[5, col] * (L0 - lam_q)
    total -= mu_p / params.sigma * z[4, col] + mu_q / params.sigma * z[6, col]
    return total


class TestTying:
    def test_layout(self):
        u = np.arange(1.0, 8.0)
        z = tie_symmetric(u)
        assert list(z[:, 0]) == [-1, -2, 3, 4, 5, 6, 7]
        assert list(z[:, 1]) == [-1, -2, 3, 6, 7, 4, 5]
        assert is_symmetric(z)

    def test_asymmetric_detected(self):
        z = tie_symmetric(np.ones(7))
        z[4, 0] += 1
        assert not is_symmetric(z)

    @given(st.lists(st.floats(-50, 50), min_size=7, max_size=7),
           st.lists(st.floats(-50, 50), min_size=14, max_size=14))
    def test_untie_is_adjoint(self, u, zb):
        u = np.array(u)
        zbar = np.array(zb).reshape(7, 2)
        lhs = float(np.sum(tie_symmetric(u) * zbar))
        rhs = float(untie_symmetric_grad(zbar) @ u)
        assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_swap_involution(self):
        s = make_state(x4=10 * 185.0, x5=10.0, x6=3 * 183.0, x7=3.0, p_p=186.0, p_q=182.0)
        z = np.random.default_rng(0).normal(size=(7, 2))
        s2, z2 = swap_makers(*swap_makers(s, z))
        assert np.array_equal(z2, z) and (s2.x4, s2.p_q) == (s.x4, s.p_q)


class TestGenerator:
    def test_zero_contract_at_rest(self):
        # empty book, lambda0 intensities, no spread: nothing to earn, nothing paid
        v = generator_F("p", make_state(), zero_z(), 0.0, 100.0, 0.0, 100.0, 0.0, APPLE)
        assert v == pytest.approx(0.0, abs=1e-9)

    def test_penalty_only(self):
        v = generator_F("q", make_state(), zero_z(), 0.0, 100.0, 0.0, 130.0, 0.0, APPLE)
        assert v == pytest.approx(-450.0, abs=1e-9)

    def test_matches_hand_sum(self, rng):
        s = make_state(x1=12.0, x2=4.0, x3=183.0, x4=9 * 185.5, x5=9.0, x6=4 * 184.0, x7=4.0,
                       p_p=186.1, p_q=182.9)
        for _ in range(20):
            z = rng.normal(0, 10, (7, 2))
            args = (rng.normal(0, 5), rng.uniform(0, 200), rng.normal(0, 5), rng.uniform(0, 200),
                    rng.uniform(0, 5))
            for maker in "pq":
                assert generator_F(maker, s, z, *args, APPLE) == pytest.approx(
                    F_by_hand(maker, s, z, *args, APPLE), rel=1e-12, abs=1e-9)

    def test_equilibrium_is_local_max(self, rng):
        s = make_state(x1=30.0, x2=20.0, x4=40 * 184.5, x5=40.0, x6=40 * 184.5, x7=40.0,
                       p_p=185.0, p_q=185.0, t=2.0)
        dg = payoff_increments("p", s, APPLE)
        u = np.array([dg[0] + 5, dg[1] + 4, 2.0, 8.0, 3.0, 8.0, 3.0])
        z = tie_symmetric(u)
        c = nash_fixed_point(s, z, APPLE)
        base = generator_F("p", s, z, c.mu_p, c.lam_p, c.mu_q, c.lam_q, 0.0, APPLE)
        for dm, dl in [(0.05, 0), (-0.05, 0), (0, 0.5), (0, -0.5), (0.05, 0.5)]:
            v = generator_F("p", s, z, c.mu_p + dm, c.lam_p + dl, c.mu_q, c.lam_q, 0.0, APPLE)
            assert v <= base + 1e-9

    def test_symmetry(self, rng):
        s = make_state(x1=3.0, x4=5 * 185.0, x5=5.0, x6=2 * 183.0, x7=2.0, p_p=185.5, p_q=183.1)
        z = rng.normal(0, 5, (7, 2))
        s2, z2 = swap_makers(s, z)
        a = generator_F("p", s, z, 0.3, 90.0, -0.2, 120.0, 1.0, APPLE)
        b = generator_F("q", s2, z2, -0.2, 120.0, 0.3, 90.0, 1.0, APPLE)
        assert a == pytest.approx(b, rel=1e-12)


class TestStepY:
    def test_quiet_step(self):
        # Z = 0: only the drift moves Y
        yp, yq = step_Y(5.0, -2.0, zero_z(), 3.0, -1.0, (0, 0, 0, 0), (0.1, 0.2, 0.3), 0.0, 0.0,
                        0.2, APPLE)
        assert (yp, yq) == pytest.approx((5.0 - 0.6, -2.0 + 0.2))

    def test_single_buyer_jump(self):
        z = zero_z()
        z[0, 0] = 2.0
        yp, yq = step_Y(0.0, 0.0, z, 0.0, 0.0, (1, 0, 0, 0), (0.0, 0.0, 0.0), 0.0, 0.0, 0.2, APPLE)
        assert yp == pytest.approx(2.0 * (1 - 100 * 0.2))
        assert yq == 0.0

    def test_brownian_driver_uses_spread_drift(self):
        z = zero_z()
        z[4, 0] = 1.5
        yp, _ = step_Y(0.0, 0.0, z, 0.0, 0.0, (0, 0, 0, 0), (0.0, 0.4, 0.0), 0.88, 0.0, 0.2, APPLE)
        assert yp == pytest.approx(1.5 * (0.4 - 0.88 / 1.76 * 0.2))

    def test_one_step_mean_is_minus_F(self, rng):
        # with jumps at lambda0 and no spread, E[dY] = -F dt
        m = 400_000
        dt = 0.2
        z = rng.normal(0, 3, (7, 2))
        counts = [rng.poisson(100 * dt, m) for _ in range(4)]
        br = tuple(rng.normal(0, np.sqrt(dt), m) for _ in range(3))
        yp, _ = step_Y(np.zeros(m), np.zeros(m), z, 7.0, 0.0, counts, br, 0.0, 0.0, dt, APPLE)
        se = yp.std() / np.sqrt(m)
        assert abs(yp.mean() + 7.0 * dt) < 4 * se


@pytest.fixture(scope="module")
def batch():
    return simulate_batch(ConstantPolicy(np.full(7, 10.0)), small, 64, seed=3)


class TestReport:
    def test_self_consistency(self, batch):
        for d in (0.0, 1.7):
            r = exchange_objective(batch, d, small)
            lhs = r.rho - (small.R0_p + small.R0_q)
            rhs = r.spread_sq + np.mean(batch.Y_p + batch.Y_q) - r.fee_revenue
            assert lhs == pytest.approx(rhs, abs=1e-9 * abs(r.rho))

    def test_no_contract_pays_nothing(self, batch):
        r = exchange_objective(batch, 0.0, small, contract=False)
        assert r.xi_p == r.xi_q == 0.0
        assert r.rho == pytest.approx(r.spread_sq)

    def test_V0_definition(self, batch):
        v, se = trader_value_V0(batch, "q", small)
        ref = batch.g_q + small.R0_q + batch.Y_q - batch.penalty_q
        assert v == pytest.approx(ref.mean()) and se == pytest.approx(ref.std(ddof=1) / 8)

    def test_trivial_path(self):
        # nothing traded, nothing paid: V0 = R0 exactly
        m = 3
        zeros = np.zeros(m)
        b = PathBatch(m=m, P_cl=np.full(m, 184.39), P_star=np.full(m, 184.39), x1=zeros, x2=zeros,
                      x4=zeros, x5=zeros, x6=zeros, x7=zeros, Y_p=zeros, Y_q=zeros, g_p=zeros,
                      g_q=zeros, penalty_p=zeros, penalty_q=zeros, int_F_p=zeros, int_F_q=zeros,
                      failed_steps=zeros.astype(int), mu_clipped_steps=zeros.astype(int),
                      lam_clipped_steps=zeros.astype(int))
        assert trader_value_V0(b, "p", APPLE)[0] == APPLE.R0_p
        r = exchange_objective(b, 2.0, APPLE)
        assert r.rho == APPLE.R0_p + APPLE.R0_q and r.spread_sq == 0.0

    def test_concat_is_weighted_mean(self):
        a = simulate_batch(ConstantPolicy(np.full(7, 10.0)), small, 10, seed=1)
        b = simulate_batch(ConstantPolicy(np.full(7, 10.0)), small, 30, seed=2)
        both = exchange_objective(PathBatch.concat([a, b]), 1.0, small)
        ra, rb = exchange_objective(a, 1.0, small), exchange_objective(b, 1.0, small)
        for name in ("fee_revenue", "spread_sq", "rho", "V0_p"):
            want = (10 * getattr(ra, name) + 30 * getattr(rb, name)) / 40
            assert getattr(both, name) == pytest.approx(want, rel=1e-12)

    def test_symmetric_values_agree(self):
        b = simulate_batch(ConstantPolicy(np.full(7, 10.0)), small, 2000, seed=5)
        vp, sp = trader_value_V0(b, "p", small)
        vq, sq = trader_value_V0(b, "q", small)
        assert abs(vp - vq) <= 3 * (sp + sq)


def test_params_with_negative_fee_rejected():
    with pytest.raises(ValueError):
        ModelParams(d=-1.0)
