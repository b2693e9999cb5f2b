"""Market makers' best responses and the Nash fixed point of the spread/intensity game."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contract import JUMP_ORDER, MAKER_COL, generator_F, payoff_increments
from .model import JumpKind, MarketState, ModelParams, delta_g


class NoPositiveRoot(ValueError):
    """The symmetric first-order condition has no positive root."""


class EquilibriumNotFound(RuntimeError):
    """No interior symmetric equilibrium exists for the proposed contract."""

    def __init__(self, message, dg1_plus_z1=None, dg2_plus_z2=None, path=None, step=None):
        super().__init__(message)
        self.dg1_plus_z1 = dg1_plus_z1
        self.dg2_plus_z2 = dg2_plus_z2
        self.path = path
        self.step = step


@dataclass
class ControlPair:
    mu_p: float
    mu_q: float
    lam_p: float
    lam_q: float
    gamma: float | None = None
    clipped: dict = field(default_factory=dict)


def best_response_lambda(maker: str, state: MarketState, z: float, params: ModelParams):
    """Optimal arrival intensity: lambda0 + z + own-order payoff increment, clipped."""
    jump = JumpKind.MAKER_P if maker == "p" else JumpKind.MAKER_Q
    raw = params.lambda0 + z + delta_g(maker, state, jump, params)
    return np.clip(raw, 0.0, params.lambda_inf)


def _positive_root(alpha, beta, kappa):
    # alpha*g^2 + beta*g - kappa = 0 with alpha, kappa > 0; cancellation-free branch
    s = np.sqrt(beta * beta + 4.0 * alpha * kappa)
    with np.errstate(divide="ignore", invalid="ignore"):
        plus = 2.0 * kappa / (beta + s)
        minus = (s - beta) / (2.0 * alpha)
    return np.where(beta >= 0, plus, minus), s


def solve_symmetric_gamma(dg1_plus_z1, dg2_plus_z2, z_tilde, sigma, c):
    """Positive root gamma of  -z/sigma - c*a1/gamma + c*a2*gamma = 0  for a1, a2 < 0.

    Scalars raise NoPositiveRoot when the sign condition fails; arrays return
    NaN in those slots.
    """
    a1 = np.asarray(dg1_plus_z1, dtype=float)
    a2 = np.asarray(dg2_plus_z2, dtype=float)
    if c <= 0:
        raise NoPositiveRoot("spread sensitivity c must be positive")
    ok = (a1 < 0) & (a2 < 0)
    if a1.ndim == 0 and a2.ndim == 0 and np.ndim(z_tilde) == 0:
        if not ok:
            raise NoPositiveRoot(f"need Dg1+z1 < 0 and Dg2+z2 < 0, got {float(a1)}, {float(a2)}")
    alpha = np.where(ok, -c * a2, 1.0)
    kappa = np.where(ok, -c * a1, 1.0)
    gamma, _ = _positive_root(alpha, z_tilde / sigma, kappa)
    gamma = np.where(ok, gamma, np.nan)
    return float(gamma) if gamma.ndim == 0 else gamma


def gamma_residual(gamma, dg1_plus_z1, dg2_plus_z2, z_tilde, sigma, c):
    return -z_tilde / sigma - c * dg1_plus_z1 / gamma + c * dg2_plus_z2 * gamma


def symmetric_controls(dg_p, dg_q, z, d, params: ModelParams):
    """Vectorized symmetric equilibrium used on the simulation path.

    dg_p, dg_q: payoff increments of each maker in JUMP_ORDER (arrays of
    shape (m,)); z: Z matrices of shape (m, 7, 2).  The buyer/seller
    increments are averaged over the two makers, which is exact for symmetric
    states.  Returns a dict with the controls, validity mask, clip masks and
    the intermediate quantities the adjoint needs.
    """
    A = params.lambda0 * np.exp(-d)
    c, sigma = params.c, params.sigma
    a1 = 0.5 * (dg_p[0] + dg_q[0]) + 0.5 * (z[:, 0, 0] + z[:, 0, 1])
    a2 = 0.5 * (dg_p[1] + dg_q[1]) + 0.5 * (z[:, 1, 0] + z[:, 1, 1])
    zt = 0.5 * (z[:, 4, 0] + z[:, 6, 1])
    valid = (a1 < 0) & (a2 < 0)
    alpha = np.where(valid, -c * A * a2, 1.0)
    kappa = np.where(valid, -c * A * a1, 1.0)
    gamma, s = _positive_root(alpha, zt / sigma, kappa)
    half = np.where(valid, 0.5 * np.log(gamma) / c, 0.0)
    mu = np.clip(half, -params.mu_inf, params.mu_inf)
    mu_free = valid & (np.abs(half) < params.mu_inf)

    raw_p = params.lambda0 + z[:, 3, 0] + dg_p[2]
    raw_q = params.lambda0 + z[:, 5, 1] + dg_q[3]
    lam_p = np.clip(raw_p, 0.0, params.lambda_inf)
    lam_q = np.clip(raw_q, 0.0, params.lambda_inf)
    return dict(
        mu=mu, lam_p=lam_p, lam_q=lam_q, gamma=np.where(valid, gamma, np.nan),
        valid=valid, mu_free=mu_free, s=s, a1=a1, a2=a2, z_tilde=zt, A=A,
        lam_p_free=(raw_p > 0) & (raw_p < params.lambda_inf),
        lam_q_free=(raw_q > 0) & (raw_q < params.lambda_inf),
    )


def nash_fixed_point(state: MarketState, z, params: ModelParams, d=None) -> ControlPair:
    """Closed-form symmetric Nash controls, splitting ln(gamma)/c evenly between makers."""
    d = params.d if d is None else d
    z = np.asarray(z, dtype=float)
    dg_p = [np.atleast_1d(v) for v in payoff_increments("p", state, params)]
    dg_q = [np.atleast_1d(v) for v in payoff_increments("q", state, params)]
    out = symmetric_controls(dg_p, dg_q, z[None], d, params)
    if not out["valid"][0]:
        raise EquilibriumNotFound(
            "Dg1+z1 and Dg2+z2 must both be negative",
            dg1_plus_z1=float(out["a1"][0]), dg2_plus_z2=float(out["a2"][0]))
    mu = float(out["mu"][0])
    return ControlPair(
        mu_p=mu, mu_q=mu,
        lam_p=float(out["lam_p"][0]), lam_q=float(out["lam_q"][0]),
        gamma=float(out["gamma"][0]),
        clipped=dict(mu_p=not bool(out["mu_free"][0]), mu_q=not bool(out["mu_free"][0]),
                     lam_p=not bool(out["lam_p_free"][0]), lam_q=not bool(out["lam_q_free"][0])),
    )


def fallback_controls(state: MarketState, z, params: ModelParams) -> ControlPair:
    """Zero spreads with clip-formula intensities, used when no symmetric equilibrium exists."""
    z = np.asarray(z, dtype=float)
    return ControlPair(
        mu_p=0.0, mu_q=0.0,
        lam_p=float(best_response_lambda("p", state, z[3, 0], params)),
        lam_q=float(best_response_lambda("q", state, z[5, 1], params)),
    )


def _grid(lo, hi, step):
    n = int(np.floor((hi - lo) / step + 1e-9))
    return np.append(lo + step * np.arange(n + 1), hi)


def deviation_gain(maker: str, state: MarketState, z, controls: ControlPair,
                   params: ModelParams, grid_step: float = 0.01, lam_step: float = 0.1, d=None):
    """Largest improvement of F^maker over unilateral deviations on a (mu, lambda) grid.

    F is additively separable in the deviating maker's spread and intensity,
    so the product-grid maximum equals the sum of the two one-dimensional
    grid maxima; generator_F is evaluated along each axis.
    """
    d = params.d if d is None else d
    dg = payoff_increments(maker, state, params)
    base = dict(mu_p=controls.mu_p, lam_p=controls.lam_p, mu_q=controls.mu_q, lam_q=controls.lam_q)

    def F(**kw):
        args = {**base, **kw}
        return generator_F(maker, state, z, args["mu_p"], args["lam_p"], args["mu_q"],
                           args["lam_q"], d, params, dg=dg)

    f0 = float(F())
    mus = _grid(-params.mu_inf, params.mu_inf, grid_step)
    lams = _grid(0.0, params.lambda_inf, lam_step)
    if maker == "p":
        gain_mu = np.max(F(mu_p=mus)) - f0
        gain_lam = np.max(F(lam_p=lams)) - f0
    else:
        gain_mu = np.max(F(mu_q=mus)) - f0
        gain_lam = np.max(F(lam_q=lams)) - f0
    return float(gain_mu + gain_lam)


def verify_nash(state: MarketState, z, controls: ControlPair, params: ModelParams,
                grid_step: float = 0.01, tol: float = 1e-3, lam_step: float = 0.1, d=None) -> bool:
    """True iff neither maker gains more than `tol` by a grid deviation."""
    if grid_step <= 0 or lam_step <= 0:
        raise ValueError("grid steps must be positive")
    return all(deviation_gain(m, state, z, controls, params, grid_step, lam_step, d) <= tol
               for m in ("p", "q"))


def best_response_mu(maker: str, state: MarketState, z, mu_other: float, params: ModelParams,
                     d=None, dg=None) -> float:
    """Exact maximizer of F^maker over its own spread in [-mu_inf, mu_inf]."""
    d = params.d if d is None else d
    col = MAKER_COL[maker]
    z = np.asarray(z, dtype=float)
    if dg is None:
        dg = payoff_increments(maker, state, params)
    A = params.lambda0 * np.exp(-d)
    c = params.c
    a1 = dg[0] + z[0, col]
    a2 = dg[1] + z[1, col]
    zt = z[4, col] if maker == "p" else z[6, col]
    # stationary points in gamma = exp(c * total spread)
    qa, qb, qc = c * A * a2, -zt / params.sigma, -c * A * a1
    cands = [-params.mu_inf, params.mu_inf]
    if qa != 0:
        roots = np.roots([qa, qb, qc])
    elif qb != 0:
        roots = np.array([-qc / qb])
    else:
        roots = np.array([])
    for g in roots:
        if np.isreal(g) and np.real(g) > 0:
            mu = np.log(np.real(g)) / c - mu_other
            if abs(mu) < params.mu_inf:
                cands.append(float(mu))

    def G(mu):
        total = mu + mu_other
        return (A * (a1 * np.exp(-c * total) + a2 * np.exp(c * total))
                - mu * zt / params.sigma)

    return max(cands, key=G)


def iterated_best_response(state: MarketState, z, params: ModelParams, d=None,
                           damping: float = 0.5, max_iter: int = 200, tol: float = 1e-8,
                           start: ControlPair | None = None) -> ControlPair:
    """Damped best-response iteration for the general (possibly asymmetric) game.

    Off the training path; the intensities have closed forms and only the
    spreads are iterated.
    """
    d = params.d if d is None else d
    z = np.asarray(z, dtype=float)
    dg_p = payoff_increments("p", state, params)
    dg_q = payoff_increments("q", state, params)
    mu_p = 0.0 if start is None else start.mu_p
    mu_q = 0.0 if start is None else start.mu_q
    for _ in range(max_iter):
        bp = best_response_mu("p", state, z, mu_q, params, d, dg_p)
        bq = best_response_mu("q", state, z, mu_p, params, d, dg_q)
        new_p = (1 - damping) * mu_p + damping * bp
        new_q = (1 - damping) * mu_q + damping * bq
        done = max(abs(new_p - mu_p), abs(new_q - mu_q)) < tol
        mu_p, mu_q = new_p, new_q
        if done:
            break
    else:
        raise EquilibriumNotFound("best-response iteration did not converge")
    return ControlPair(
        mu_p=mu_p, mu_q=mu_q,
        lam_p=float(best_response_lambda("p", state, z[3, 0], params)),
        lam_q=float(best_response_lambda("q", state, z[5, 1], params)),
    )


__all__ = [
    "ControlPair", "EquilibriumNotFound", "NoPositiveRoot", "best_response_lambda",
    "best_response_mu", "deviation_gain", "fallback_controls", "gamma_residual",
    "iterated_best_response", "nash_fixed_point", "solve_symmetric_gamma",
    "symmetric_controls", "verify_nash", "JUMP_ORDER",
]
