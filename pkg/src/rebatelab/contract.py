"""Rebate contracts: sensitivities Z, the generator F, Y dynamics and the exchange report.

A Z matrix is a float array of shape (..., 7, 2): ``Z[..., k - 1, 0]`` is the
sensitivity of maker p's contract to driver k and ``Z[..., k - 1, 1]`` the
one of maker q.  Drivers are ordered (N^a, N^b, W, N^p, W^p, N^q, W^q).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import (
    JumpKind,
    MarketState,
    ModelParams,
    _check_maker,
    delta_g,
    investor_intensities,
)

JUMP_ORDER = (JumpKind.BUYER, JumpKind.SELLER, JumpKind.MAKER_P, JumpKind.MAKER_Q)
# rows of Z paired with each jump process, in JUMP_ORDER
JUMP_ROWS = (0, 1, 3, 5)
MAKER_COL = {"p": 0, "q": 1}


def zero_z(shape=()) -> np.ndarray:
    return np.zeros(tuple(shape) + (7, 2))


def tie_symmetric(u) -> np.ndarray:
    """Map seven policy outputs to a symmetric 7x2 Z matrix.

    Buyer and seller sensitivities enter with a negative sign so that positive
    outputs push Dg + z below zero; all other components keep their sign.
    Maker q receives p's contract with the roles of the two makers swapped.
    """
    u = np.asarray(u, dtype=float)
    z = np.empty(u.shape[:-1] + (7, 2))
    z[..., 0, :] = -u[..., 0:1]
    z[..., 1, :] = -u[..., 1:2]
    z[..., 2, :] = u[..., 2:3]
    z[..., 3, 0] = u[..., 3]
    z[..., 4, 0] = u[..., 4]
    z[..., 5, 0] = u[..., 5]
    z[..., 6, 0] = u[..., 6]
    z[..., 3, 1] = u[..., 5]
    z[..., 4, 1] = u[..., 6]
    z[..., 5, 1] = u[..., 3]
    z[..., 6, 1] = u[..., 4]
    return z


def untie_symmetric_grad(zbar) -> np.ndarray:
    """Adjoint of tie_symmetric: gradient on u from a gradient on Z."""
    zbar = np.asarray(zbar)
    ubar = np.empty(zbar.shape[:-2] + (7,))
    ubar[..., 0] = -(zbar[..., 0, 0] + zbar[..., 0, 1])
    ubar[..., 1] = -(zbar[..., 1, 0] + zbar[..., 1, 1])
    ubar[..., 2] = zbar[..., 2, 0] + zbar[..., 2, 1]
    ubar[..., 3] = zbar[..., 3, 0] + zbar[..., 5, 1]
    ubar[..., 4] = zbar[..., 4, 0] + zbar[..., 6, 1]
    ubar[..., 5] = zbar[..., 5, 0] + zbar[..., 3, 1]
    ubar[..., 6] = zbar[..., 6, 0] + zbar[..., 4, 1]
    return ubar


def is_symmetric(z, atol: float = 0.0) -> bool:
    z = np.asarray(z)
    pairs = [((0, 0), (0, 1)), ((1, 0), (1, 1)), ((2, 0), (2, 1)), ((3, 0), (5, 1)),
             ((4, 0), (6, 1)), ((5, 0), (3, 1)), ((6, 0), (4, 1))]
    return all(np.allclose(z[..., a[0], a[1]], z[..., b[0], b[1]], atol=atol, rtol=0)
               for a, b in pairs)


def swap_makers(state: MarketState, z) -> tuple[MarketState, np.ndarray]:
    """Relabel p <-> q in both the state and the contract matrix."""
    s = state.copy()
    s.x4, s.x6 = state.x6, state.x4
    s.x5, s.x7 = state.x7, state.x5
    s.p_p, s.p_q = state.p_q, state.p_p
    z = np.asarray(z)
    zs = np.empty_like(z)
    perm = [0, 1, 2, 5, 6, 3, 4]
    zs[..., :, 0] = z[..., perm, 1]
    zs[..., :, 1] = z[..., perm, 0]
    return s, zs


def payoff_increments(maker: str, state: MarketState, params: ModelParams):
    """Dg for the four jump kinds, in JUMP_ORDER."""
    return tuple(delta_g(maker, state, kind, params) for kind in JUMP_ORDER)


def generator_F(maker: str, state: MarketState, z, mu_p, lam_p, mu_q, lam_q, d,
                params: ModelParams, dg=None):
    """Drift functional of maker `maker`'s contract at the given controls.

    `dg` may carry precomputed payoff increments (in JUMP_ORDER) to avoid
    recomputation inside grid searches.
    """
    _check_maker(maker)
    col = MAKER_COL[maker]
    z = np.asarray(z)
    if dg is None:
        dg = payoff_increments(maker, state, params)
    lam_a, lam_b = investor_intensities(mu_p, mu_q, d, params)
    rates = (lam_a, lam_b, lam_p, lam_q)
    lam0 = params.lambda0
    own = lam_p if maker == "p" else lam_q
    out = -0.5 * (own - lam0) ** 2
    for inc, rate, row in zip(dg, rates, JUMP_ROWS):
        out = out + inc * rate - z[..., row, col] * (lam0 - rate)
    out = out - (mu_p / params.sigma) * z[..., 4, col] - (mu_q / params.sigma) * z[..., 6, col]
    return out


def step_Y(y_p, y_q, z, F_p, F_q, counts, brownian, mu_p, mu_q, dt, params: ModelParams):
    """Advance both continuation values by one Euler step.

    counts: realized jump counts (N^a, N^b, N^p, N^q) over the step.
    brownian: increments (dW, dB^p, dB^q) of the efficient price and of the
    makers' quote noise.  The contract integrates the canonical drivers
    W^i = B^i - int mu^i / sigma dt, whose drift under the controlled measure
    is the one compensated by F.
    """
    z = np.asarray(z)
    n_a, n_b, n_p, n_q = counts
    dW, dBp, dBq = brownian
    comp = params.lambda0 * dt
    dWp = dBp - mu_p / params.sigma * dt
    dWq = dBq - mu_q / params.sigma * dt
    out = []
    for col, (y, F) in enumerate(((y_p, F_p), (y_q, F_q))):
        zc = z[..., :, col]
        inc = (zc[..., 0] * (n_a - comp) + zc[..., 1] * (n_b - comp) + zc[..., 2] * dW
               + zc[..., 3] * (n_p - comp) + zc[..., 4] * dWp + zc[..., 5] * (n_q - comp)
               + zc[..., 6] * dWq - F * dt)
        out.append(y + inc)
    return out[0], out[1]


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    m = values.size
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(m)) if m > 1 else float("nan")
    return mean, se


def trader_value_V0(batch, maker: str, params: ModelParams) -> tuple[float, float]:
    """Monte Carlo value of a maker: g(X_T) + xi - intensity penalty, with xi = R0 + Y_T."""
    _check_maker(maker)
    R0 = params.R0_p if maker == "p" else params.R0_q
    if maker == "p":
        vals = batch.g_p + R0 + batch.Y_p - batch.penalty_p
    else:
        vals = batch.g_q + R0 + batch.Y_q - batch.penalty_q
    return _mean_se(vals)


@dataclass
class RebateReport:
    xi_p: float
    xi_q: float
    V0_p: float
    V0_q: float
    rho: float
    spread_sq: float
    fee_revenue: float
    xi_p_se: float
    xi_q_se: float
    V0_p_se: float
    V0_q_se: float
    rho_se: float
    spread_sq_se: float
    fee_revenue_se: float
    m: int
    contract: bool = True
    equilibrium_failures: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def exchange_objective(batch, d: float, params: ModelParams, contract: bool = True) -> RebateReport:
    """Exchange objective: squared clearing gap plus rebates minus fee revenue.

    With `contract` the rebates are R0 + Y_T (saturated participation
    constraint).  Without it no rebate is paid at all: the "no
    incentive" scenario.
    """
    R0p, R0q = params.R0_p, params.R0_q
    spread = (batch.P_cl - batch.P_star) ** 2
    fees = d * (batch.x1 + batch.x2)
    if contract:
        xi_p = R0p + batch.Y_p
        xi_q = R0q + batch.Y_q
    else:
        xi_p = np.zeros_like(spread)
        xi_q = np.zeros_like(spread)
    per_path = spread + xi_p + xi_q - fees
    v_p = batch.g_p + xi_p - batch.penalty_p
    v_q = batch.g_q + xi_q - batch.penalty_q
    stats = {name: _mean_se(v) for name, v in
             dict(xi_p=xi_p, xi_q=xi_q, V0_p=v_p, V0_q=v_q, rho=per_path,
                  spread_sq=spread, fee_revenue=fees).items()}
    kw = {}
    for name, (mean, se) in stats.items():
        kw[name] = mean
        kw[name + "_se"] = se
    return RebateReport(m=int(spread.size), contract=contract,
                        equilibrium_failures=int(np.sum(batch.failed_steps > 0)), **kw)
