"""Static market algebra for the batch auction.

Parameters, the market state tuple, the linear clearing rule, the makers'
payoff functions and their jump increments, investor intensities and the
order-cancellation threshold.  Every function here accepts either Python
floats or numpy arrays (one entry per simulated path) for state fields.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

import numpy as np


class ParameterError(ValueError):
    """Raised when a ModelParams instance violates its invariants."""


@dataclass(frozen=True)
class ModelParams:
    T: float = 10.0
    n_steps: int = 50
    K0: float = 1.0
    Kp: float = 1.0
    Kq: float = 1.0
    P0_star: float = 184.39
    sigma: float = 1.76
    lambda0: float = 100.0
    lambda_inf: float = 200.0
    mu_inf: float = 60.0
    c: float = 0.1
    v_a: float = 1.0
    v_b: float = 1.0
    d: float = 0.0
    epsilon: float = 1.0
    R0_p: float = 100.0 - 35000.0
    R0_q: float = 100.0 - 35000.0
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def validate(self) -> None:
        problems = []
        if not self.T > 0:
            problems.append("T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            problems.append("n_steps must be an integer >= 1")
        for name in ("K0", "Kp", "Kq", "sigma", "mu_inf"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        for name in ("c", "d", "epsilon", "v_a", "v_b"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be non-negative")
        if not 0 <= self.lambda0 <= self.lambda_inf:
            problems.append("need 0 <= lambda0 <= lambda_inf")
        if not 0 <= self.rng_seed < 2**64:
            problems.append("rng_seed must fit in 64 bits")
        if problems:
            raise ParameterError("; ".join(problems))

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


APPLE = ModelParams(P0_star=184.39, sigma=1.76)
ALPHABET = ModelParams(P0_star=134.24, sigma=2.11)


@dataclass
class MarketState:
    """Auction characteristics X = (x1..x7) plus quotes, clock and next order sizes.

    x1, x2: surviving buy / sell investor volume; x3: efficient price;
    x4, x6: price-weighted order sums of makers p and q; x5, x7: their order
    counts; r1, r2: size of the next buy / sell order after its
    cancellation draw (0 when it will be cancelled).
    """

    t: object = 0.0
    x1: object = 0.0
    x2: object = 0.0
    x3: object = 0.0
    x4: object = 0.0
    x5: object = 0.0
    x6: object = 0.0
    x7: object = 0.0
    p_p: object = 0.0
    p_q: object = 0.0
    r1: object = 0.0
    r2: object = 0.0

    @classmethod
    def initial(cls, params: ModelParams, r1=None, r2=None) -> "MarketState":
        P0 = params.P0_star
        return cls(
            t=0.0, x3=P0, p_p=P0, p_q=P0,
            r1=params.v_a if r1 is None else r1,
            r2=params.v_b if r2 is None else r2,
        )

    def copy(self) -> "MarketState":
        return replace(self)

    def x(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3, self.x4, self.x5, self.x6, self.x7], dtype=float)


class JumpKind(enum.Enum):
    BUYER = "buyer"
    SELLER = "seller"
    MAKER_P = "maker_p"
    MAKER_Q = "maker_q"


MAKERS = ("p", "q")


def _check_maker(maker: str) -> None:
    if maker not in MAKERS:
        raise ValueError(f"maker must be 'p' or 'q', got {maker!r}")


def clearing_numerator(state: MarketState, params: ModelParams):
    return (state.x1 - state.x2 + params.Kp * state.x4 + params.Kq * state.x6
            + params.K0 * params.P0_star)


def clearing_denominator(state: MarketState, params: ModelParams):
    return params.Kp * state.x5 + params.Kq * state.x7 + params.K0


def clearing_price(state: MarketState, params: ModelParams):
    """Price zeroing limit-order volume plus net investor market orders."""
    return clearing_numerator(state, params) / clearing_denominator(state, params)


def g_from_parts(num, den, x3, count, weighted, K):
    """K (P - x3)(count P - weighted) with P = num / den."""
    price = num / den
    return K * (price - x3) * (count * price - weighted)


def g_partials(num, den, x3, count, weighted, K):
    """Partial derivatives of g_from_parts with respect to num and weighted."""
    price = num / den
    dnum = K * ((count * price - weighted) + (price - x3) * count) / den
    dweighted = -K * (price - x3)
    return dnum, dweighted


def _maker_slots(maker: str, state: MarketState, params: ModelParams):
    if maker == "p":
        return state.x5, state.x4, params.Kp
    return state.x7, state.x6, params.Kq


def payoff_g(maker: str, state: MarketState, params: ModelParams):
    """Terminal trading payoff of a maker, K(P^cl - P*)(count P^cl - weighted)."""
    _check_maker(maker)
    count, weighted, K = _maker_slots(maker, state, params)
    return g_from_parts(clearing_numerator(state, params), clearing_denominator(state, params),
                        state.x3, count, weighted, K)


def apply_jump(state: MarketState, jump: JumpKind, params: ModelParams) -> MarketState:
    """State right after one jump of the given kind (maker orders at current quotes)."""
    new = state.copy()
    if jump is JumpKind.BUYER:
        new.x1 = state.x1 + state.r1
    elif jump is JumpKind.SELLER:
        new.x2 = state.x2 + state.r2
    elif jump is JumpKind.MAKER_P:
        new.x4 = state.x4 + state.p_p
        new.x5 = state.x5 + 1
    elif jump is JumpKind.MAKER_Q:
        new.x6 = state.x6 + state.p_q
        new.x7 = state.x7 + 1
    else:
        raise ValueError(f"unknown jump {jump!r}")
    return new


def jump_parts(maker: str, jump: JumpKind, state: MarketState, params: ModelParams):
    """(num, den, count, weighted) of the post-jump state as seen by `maker`.

    Used by the vectorized simulation and its adjoint; equivalent to
    evaluating payoff_g on apply_jump(state, jump).
    """
    num = clearing_numerator(state, params)
    den = clearing_denominator(state, params)
    count, weighted, _ = _maker_slots(maker, state, params)
    if jump is JumpKind.BUYER:
        return num + state.r1, den, count, weighted
    if jump is JumpKind.SELLER:
        return num - state.r2, den, count, weighted
    if jump is JumpKind.MAKER_P:
        num = num + params.Kp * state.p_p
        den = den + params.Kp
        if maker == "p":
            return num, den, count + 1, weighted + state.p_p
        return num, den, count, weighted
    num = num + params.Kq * state.p_q
    den = den + params.Kq
    if maker == "q":
        return num, den, count + 1, weighted + state.p_q
    return num, den, count, weighted


def delta_g(maker: str, state: MarketState, jump: JumpKind, params: ModelParams):
    """Payoff increment g^i(state after one jump) - g^i(state).

    Evaluated as K[(P - x3) dE + dP (E + dE)] with E = count P - weighted,
    which avoids subtracting two large payoffs.
    """
    _check_maker(maker)
    count, weighted, K = _maker_slots(maker, state, params)
    den = clearing_denominator(state, params)
    price = clearing_numerator(state, params) / den
    if jump is JumpKind.BUYER:
        dp = state.r1 / den
        dE = count * dp
    elif jump is JumpKind.SELLER:
        dp = -state.r2 / den
        dE = count * dp
    elif jump in (JumpKind.MAKER_P, JumpKind.MAKER_Q):
        own = "p" if jump is JumpKind.MAKER_P else "q"
        Kj = params.Kp if own == "p" else params.Kq
        quote = state.p_p if own == "p" else state.p_q
        dp = Kj * (quote - price) / (den + Kj)
        dE = count * dp
        if own == maker:
            dE = dE + (price + dp) - quote
    else:
        raise ValueError(f"unknown jump {jump!r}")
    E = count * price - weighted
    return K * ((price - state.x3) * dE + dp * (E + dE))


def investor_intensities(mu_p, mu_q, d, params: ModelParams):
    """Buy and sell investor arrival rates under the makers' spreads and the fee."""
    spread = mu_p + mu_q
    base = params.lambda0 * np.exp(-d)
    return base * np.exp(-params.c * spread), base * np.exp(params.c * spread)


def cancellation_survival(time_remaining):
    """Probability that an investor order arriving with `time_remaining` left survives.

    The threshold 1/(1+u) + 1/2 exceeds one near the close; it is clamped so the
    result is a probability.
    """
    u = np.asarray(time_remaining, dtype=float)
    if np.any(u < 0):
        raise ValueError("time_remaining must be non-negative")
    out = np.minimum(1.0, 1.0 / (1.0 + u) + 0.5)
    return float(out) if out.ndim == 0 else out


def _survival_antiderivative(u):
    # integral of cancellation_survival over [0, u]
    u = np.asarray(u, dtype=float)
    tail = 1.0 + np.log((1.0 + np.maximum(u, 1.0)) / 2.0) + 0.5 * (np.maximum(u, 1.0) - 1.0)
    return np.where(u <= 1.0, u, tail)


def mean_survival(time_remaining, dt):
    """Survival probability of an order arriving uniformly in the next `dt` time units.

    Averages cancellation_survival over remaining times in
    [time_remaining - dt, time_remaining], so thinning a Poisson count with it
    reproduces the exact expected number of surviving orders over the step.
    """
    u = np.asarray(time_remaining, dtype=float)
    if np.any(u < 0) or dt <= 0:
        raise ValueError("need time_remaining >= 0 and dt > 0")
    lo = np.maximum(u - dt, 0.0)
    out = (_survival_antiderivative(u) - _survival_antiderivative(lo)) / (u - lo)
    out = np.where(u - lo > 0, out, 1.0)
    return float(out) if out.ndim == 0 else out
