"""Independent numerical oracles and the quick self-check behind `rebatelab verify`."""

from __future__ import annotations

import numpy as np

from .contract import payoff_increments, tie_symmetric
from .deep_bsde import PolicyNetwork, frozen_loss, loss_and_grad
from .equilibrium import EquilibriumNotFound, nash_fixed_point, solve_symmetric_gamma, verify_nash
from .model import APPLE, MarketState, ModelParams, clearing_price
from .simulation import ConstantPolicy, simulate_batch


def bisect(f, lo, hi, max_iter=4000):
    """Elementwise bisection for a sign change of f on [lo, hi], run to floating-point resolution."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    lo, hi = lo.copy(), hi.copy()
    flo = f(lo)
    if np.any(np.sign(flo) == np.sign(f(hi))):
        raise ValueError("root not bracketed")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if np.all((mid == lo) | (mid == hi)):
            break
        fm = f(mid)
        same = np.sign(fm) == np.sign(flo)
        hit = fm == 0
        lo = np.where(same | hit, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same & ~hit, hi, mid)
    out = 0.5 * (lo + hi)
    return float(out) if out.ndim == 0 else out


def clearing_excess(x, state: MarketState, params: ModelParams):
    """Limit-order demand plus net market orders at price x, from aggregated order books.

    Each maker order at price P_j contributes K (P_j - x) shares; the opening
    block trade contributes K0 (P0* - x); investors add x1 - x2.
    """
    books = params.K0 * (params.P0_star - x)
    books += params.Kp * (state.x4 - state.x5 * x) + params.Kq * (state.x6 - state.x7 * x)
    return books + state.x1 - state.x2


def clearing_by_bisection(state: MarketState, params: ModelParams) -> float:
    shape = np.shape(state.x1)
    return bisect(lambda x: clearing_excess(x, state, params), np.full(shape, -1e7), 1e7)


def gamma_by_bisection(a1, a2, z_tilde, sigma, c, lo=1e-12, hi=1e12):
    """Root of the first-order condition in gamma; decreasing when a1, a2 < 0."""
    f = lambda g: -z_tilde / sigma - c * a1 / g + c * a2 * g  # noqa: E731
    return bisect(f, np.full(np.shape(a1), lo), hi)


def random_symmetric_state(rng, params: ModelParams, t=None) -> MarketState:
    n = int(rng.integers(0, 400))
    P0 = params.P0_star
    quote = P0 + rng.normal(0, 3)
    x4 = n * (P0 + rng.normal(0, 2))
    return MarketState(
        t=float(rng.uniform(0, params.T)) if t is None else t,
        x1=float(rng.integers(0, 600)), x2=float(rng.integers(0, 600)),
        x3=P0 + rng.normal(0, 4), x4=x4, x5=float(n), x6=x4, x7=float(n),
        p_p=quote, p_q=quote,
        r1=params.v_a * float(rng.random() < 0.8), r2=params.v_b * float(rng.random() < 0.8),
    )


def random_states(rng, params: ModelParams, n: int) -> MarketState:
    """n general (not necessarily symmetric) states as one array-valued MarketState."""
    P0 = params.P0_star
    x5 = rng.integers(0, 400, n).astype(float)
    x7 = rng.integers(0, 400, n).astype(float)
    return MarketState(
        t=0.0, x1=rng.integers(0, 600, n).astype(float), x2=rng.integers(0, 600, n).astype(float),
        x3=P0 + rng.normal(0, 4, n), x4=x5 * (P0 + rng.normal(0, 2, n)), x5=x5,
        x6=x7 * (P0 + rng.normal(0, 2, n)), x7=x7, p_p=P0 + rng.normal(0, 3, n),
        p_q=P0 + rng.normal(0, 3, n), r1=np.ones(n), r2=np.ones(n))


def random_valid_z(rng, state: MarketState, params: ModelParams) -> np.ndarray:
    """Tied Z with Dg + z strictly negative for buyers and sellers."""
    dg = payoff_increments("p", state, params)
    u = rng.uniform(0, 20, 7)
    u[0] = max(dg[0], 0.0) + rng.uniform(0.5, 15)
    u[1] = max(dg[1], 0.0) + rng.uniform(0.5, 15)
    return tie_symmetric(u)


def check_clearing(n=2000, seed=0, params=APPLE):
    s = random_states(np.random.default_rng(seed), params, n)
    worst = float(np.max(np.abs(clearing_price(s, params) - clearing_by_bisection(s, params))))
    return "clearing price vs bisection", worst < 1e-9, f"max |diff| = {worst:.3g}"


def check_gamma(n=2000, seed=0, params=APPLE):
    rng = np.random.default_rng(seed)
    a1 = -rng.uniform(1e-3, 50, n)
    a2 = -rng.uniform(1e-3, 50, n)
    zt = rng.uniform(-50, 50, n)
    g = solve_symmetric_gamma(a1, a2, zt, params.sigma, params.c)
    ref = gamma_by_bisection(a1, a2, zt, params.sigma, params.c)
    worst = float(np.max(np.abs(g - ref) / ref))
    return "gamma root vs bisection", worst < 1e-9, f"max rel diff = {worst:.3g}"


def check_nash(n=10, seed=0, params=APPLE):
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(n):
        s = random_symmetric_state(rng, params)
        z = random_valid_z(rng, s, params)
        try:
            ctl = nash_fixed_point(s, z, params)
        except EquilibriumNotFound:
            continue
        ok += verify_nash(s, z, ctl, params, grid_step=0.01, tol=1e-3)
    return "Nash controls vs grid search", ok == n, f"{ok}/{n} verified"


def check_martingale(m=4000, seed=0, params=APPLE):
    pol = ConstantPolicy(np.random.default_rng(seed).uniform(0, 20, 7))
    b = simulate_batch(pol, params, m, seed, force_controls=True)
    vals = b.Y_p + b.int_F_p
    mean, se = vals.mean(), vals.std(ddof=1) / np.sqrt(m)
    return "compensated Y has zero mean", bool(abs(mean) <= 3 * se), f"mean {mean:.3g}, SE {se:.3g}"


def check_gradient(coords=20, seed=0, params=None):
    params = params or APPLE.with_(n_steps=10, d=1.0)
    net = PolicyNetwork(seed=seed)
    _, grad, batch = loss_and_grad(net, params, params.d, 4, seed)
    replay = [info["counts"] for info in batch.tape]
    theta = net.flat()
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-5
    for i in rng.choice(theta.size, size=min(coords, theta.size), replace=False):
        vals = []
        for sgn in (1, -1):
            t = theta.copy()
            t[i] += sgn * h
            trial = net.copy()
            trial.set_flat(t)
            vals.append(frozen_loss(trial, params, params.d, 4, seed, replay))
        fd = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    return "adjoint gradient vs finite differences", bool(worst < 1e-4), f"max rel err = {worst:.3g}"


CHECKS = (check_clearing, check_gamma, check_nash, check_martingale, check_gradient)


def run_all(seed=0):
    return [check(seed=seed) for check in CHECKS]
