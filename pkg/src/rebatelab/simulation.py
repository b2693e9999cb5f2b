"""Euler simulation of the controlled auction under the makers' equilibrium controls.

Randomness layout
-----------------
Path ``j`` of a batch drawn for ``(seed, purpose, index)`` owns the generator
``Generator(PCG64(SeedSequence(entropy=seed, spawn_key=(purpose, index, j))))``.
From it we draw, in this order, ``standard_normal((n_steps, 3))`` followed by
``random((n_steps, 8))``.  Row k of these arrays is the StepRandomness of step
k, columns being

    normals:  dW, dB^p, dB^q                   (unit variance, scaled by sqrt(dt))
    uniforms: U^a, U^b, U^p, U^q               (inverse-CDF jump counts)
              A, B                             (cancellation marks of the next orders)
              S^a, S^b                         (survivor counts of the remaining arrivals)

Jump counts per step are Poisson(lambda * dt) rather than Bernoulli, so the
scheme stays valid when lambda * dt exceeds one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import bdtr, ndtri, pdtr

from .contract import generator_F, step_Y, tie_symmetric
from .equilibrium import EquilibriumNotFound, symmetric_controls
from .model import (
    JumpKind,
    MarketState,
    ModelParams,
    cancellation_survival,
    clearing_denominator,
    mean_survival,
    clearing_numerator,
    delta_g,
    investor_intensities,
    payoff_g,
)

N_NORMAL = 3
N_UNIFORM = 8
CHUNK = 8192

# spawn_key purposes
PURPOSE_TRAIN = 0
PURPOSE_EVAL = 1
PURPOSE_TEST = 2


def path_generator(seed: int, purpose: int, index: int, path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(purpose), int(index), int(path)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class StepRandomness:
    """Draws consumed by one step of a batch; every array has a leading path axis."""

    normal: np.ndarray      # (m, 3)
    jump_u: np.ndarray      # (m, 4)
    marks: np.ndarray       # (m, 2)
    survivor_u: np.ndarray  # (m, 2)

    @classmethod
    def draw(cls, rng: np.random.Generator, m: int = 1) -> "StepRandomness":
        normal = rng.standard_normal((m, N_NORMAL))
        u = rng.random((m, N_UNIFORM))
        return cls(normal, u[:, :4], u[:, 4:6], u[:, 6:8])


def draw_randomness(seed: int, paths, n_steps: int, purpose: int = PURPOSE_EVAL, index: int = 0):
    """Normals (n_steps, m, 3) and uniforms (n_steps, m, 8) for the given path indices."""
    paths = list(paths)
    normals = np.empty((n_steps, len(paths), N_NORMAL))
    uniforms = np.empty((n_steps, len(paths), N_UNIFORM))
    for col, j in enumerate(paths):
        g = path_generator(seed, purpose, index, j)
        normals[:, col] = g.standard_normal((n_steps, N_NORMAL))
        uniforms[:, col] = g.random((n_steps, N_UNIFORM))
    return normals, uniforms


def _step_randomness(normals, uniforms, k) -> StepRandomness:
    u = uniforms[k]
    return StepRandomness(normals[k], u[:, :4], u[:, 4:6], u[:, 6:8])


def poisson_icdf(u, lam):
    """Smallest integer k with P(Poisson(lam) <= k) >= u, elementwise."""
    u, lam = np.broadcast_arrays(np.asarray(u, float), np.asarray(lam, float))
    shape = u.shape
    u, lam = u.ravel(), np.maximum(lam.ravel(), 0.0)
    zq = ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    # Cornish-Fisher start with continuity correction, then exact search
    k = np.floor(lam + np.sqrt(lam) * zq + (zq * zq - 1.0) / 6.0 + 0.5)
    k = np.where(lam > 0, np.maximum(k, 0.0), 0.0)
    pos = lam > 0
    while True:
        up = pos & (pdtr(k, lam) < u)
        if not up.any():
            break
        k[up] += 1
    while True:
        down = pos & (k > 0)
        down[down] = pdtr(k[down] - 1, lam[down]) >= u[down]
        if not down.any():
            break
        k[down] -= 1
    return k.reshape(shape)


def binomial_icdf(u, n, p):
    """Smallest k with P(Binomial(n, p) <= k) >= u, elementwise."""
    u, n, p = np.broadcast_arrays(np.asarray(u, float), np.asarray(n, float), np.asarray(p, float))
    shape = u.shape
    u, p = u.ravel(), p.ravel()
    n = np.maximum(n.ravel(), 0.0)
    zq = ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    k = np.floor(n * p + np.sqrt(n * p * (1 - p)) * zq + (1 - 2 * p) * (zq * zq - 1) / 6 + 0.5)
    k = np.clip(k, 0.0, n)
    certain = p >= 1.0
    k = np.where(certain, n, k)
    live = (n > 0) & ~certain & (p > 0)
    k = np.where((p <= 0) | (n <= 0), 0.0, k)
    ni = n.astype(np.int64)
    while True:
        up = live & (k < n)
        up[up] = bdtr(k[up], ni[up], p[up]) < u[up]
        if not up.any():
            break
        k[up] += 1
    while True:
        down = live & (k > 0)
        down[down] = bdtr(k[down] - 1, ni[down], p[down]) >= u[down]
        if not down.any():
            break
        k[down] -= 1
    return k.reshape(shape)


class ZeroPolicy:
    """Z identically zero; never touches a network."""

    def outputs(self, obs, params):
        return np.zeros((obs["t"].shape[0], 7)), None


class ConstantPolicy:
    """The same seven raw outputs at every state."""

    def __init__(self, u):
        self.u = np.asarray(u, dtype=float).reshape(7)

    def outputs(self, obs, params):
        return np.tile(self.u, (obs["t"].shape[0], 1)), None


def observation(t, state: MarketState, y_p, y_q) -> dict:
    m = np.shape(state.x1)[0]
    return dict(t=np.full(m, float(t)), x1=state.x1, x2=state.x2, x3=state.x3, x4=state.x4,
                x5=state.x5, x6=state.x6, x7=state.x7, Y_p=y_p, Y_q=y_q,
                p_p=state.p_p, p_q=state.p_q)


def _controls(state: MarketState, z, d, params: ModelParams, force: bool):
    """Payoff increments, equilibrium controls and generators at the current state."""
    dg_p = tuple(delta_g("p", state, k, params) for k in JumpKind)
    dg_q = tuple(delta_g("q", state, k, params) for k in JumpKind)
    eq = symmetric_controls(dg_p, dg_q, z, d, params)
    m = z.shape[0]
    if force:
        mu = np.zeros(m)
        lam_p = np.full(m, params.lambda0)
        lam_q = np.full(m, params.lambda0)
        valid = np.ones(m, dtype=bool)
    else:
        valid = eq["valid"]
        mu = np.where(valid, eq["mu"], 0.0)
        lam_p, lam_q = eq["lam_p"], eq["lam_q"]
    lam_a, lam_b = investor_intensities(mu, mu, d, params)
    F_p = generator_F("p", state, z, mu, lam_p, mu, lam_q, d, params, dg=dg_p)
    F_q = generator_F("q", state, z, mu, lam_p, mu, lam_q, d, params, dg=dg_q)
    return dict(dg_p=dg_p, dg_q=dg_q, eq=eq, mu=mu, lam_p=lam_p, lam_q=lam_q,
                lam_a=lam_a, lam_b=lam_b, F_p=F_p, F_q=F_q, valid=valid)


def _copy_state(s: MarketState) -> MarketState:
    return MarketState(**{k: (np.array(v, copy=True) if isinstance(v, np.ndarray) else v)
                          for k, v in vars(s).items()})


def _initial_state(params: ModelParams, m: int) -> MarketState:
    z = np.zeros(m)
    P0 = np.full(m, params.P0_star)
    return MarketState(t=0.0, x1=z.copy(), x2=z.copy(), x3=P0.copy(), x4=z.copy(), x5=z.copy(),
                       x6=z.copy(), x7=z.copy(), p_p=P0.copy(), p_q=P0.copy(),
                       r1=np.full(m, params.v_a), r2=np.full(m, params.v_b))


def advance(state: MarketState, y_p, y_q, policy, params: ModelParams, rnd: StepRandomness,
            d=None, force_controls=False, counts=None):
    """One vectorized step. Returns (state', y_p', y_q', info) with info holding the tape entry.

    `counts` replays frozen jump counts and survivor counts (shape (m, 6):
    N^a, N^b, N^p, N^q, surviving buys, surviving sells) instead of drawing them.
    """
    d = params.d if d is None else d
    dt = params.dt
    m = rnd.normal.shape[0]
    # orders arrive uniformly within the step; thin them with the survival averaged over it
    s_bar = mean_survival(params.T - state.t, dt)
    state = _copy_state(state)
    state.r1 = params.v_a * (rnd.marks[:, 0] <= s_bar)
    state.r2 = params.v_b * (rnd.marks[:, 1] <= s_bar)

    obs = observation(state.t, state, y_p, y_q)
    u, cache = policy.outputs(obs, params)
    z = tie_symmetric(u)
    ctl = _controls(state, z, d, params, force_controls)

    if counts is None:
        rates = np.stack([ctl["lam_a"], ctl["lam_b"], ctl["lam_p"], ctl["lam_q"]], axis=1) * dt
        n = poisson_icdf(rnd.jump_u, rates)
        first = (n[:, :2] >= 1) & (rnd.marks <= s_bar)
        rest = binomial_icdf(rnd.survivor_u, np.maximum(n[:, :2] - 1, 0), s_bar)
        counts = np.concatenate([n, first + rest], axis=1)
    n_a, n_b, n_p, n_q, surv_a, surv_b = counts.T

    sq = np.sqrt(dt)
    brownian = (rnd.normal[:, 0] * sq, rnd.normal[:, 1] * sq, rnd.normal[:, 2] * sq)
    mu = ctl["mu"]
    y_p2, y_q2 = step_Y(y_p, y_q, z, ctl["F_p"], ctl["F_q"], (n_a, n_b, n_p, n_q), brownian,
                        mu, mu, dt, params)

    new = _copy_state(state)
    new.t = state.t + dt
    new.x1 = state.x1 + params.v_a * surv_a
    new.x2 = state.x2 + params.v_b * surv_b
    new.x3 = state.x3 + params.sigma * brownian[0]
    new.x4 = state.x4 + state.p_p * n_p
    new.x5 = state.x5 + n_p
    new.x6 = state.x6 + state.p_q * n_q
    new.x7 = state.x7 + n_q
    new.p_p = state.p_p + mu * dt + params.sigma * brownian[1]
    new.p_q = state.p_q + mu * dt + params.sigma * brownian[2]
    info = dict(state=state, y_p=y_p, y_q=y_q, obs=obs, u=u, z=z, cache=cache, counts=counts,
                brownian=brownian, **ctl)
    return new, y_p2, y_q2, info


def simulate_step(state: MarketState, y_pair, policy, params: ModelParams, randomness: StepRandomness,
                  d=None, force_controls=False, strict=False):
    """Advance (state, (Y^p, Y^q)) by one step; fields may be scalars or per-path arrays."""
    scalar = np.ndim(state.x1) == 0
    if scalar:
        state = MarketState(**{k: (np.atleast_1d(np.asarray(v, float)) if k != "t" else float(v))
                               for k, v in vars(state).items()})
        y_pair = tuple(np.atleast_1d(np.asarray(y, float)) for y in y_pair)
    new, yp, yq, info = advance(state, y_pair[0], y_pair[1], policy, params, randomness, d,
                                force_controls)
    if strict and not force_controls and not info["valid"].all():
        bad = int(np.flatnonzero(~info["valid"])[0])
        raise EquilibriumNotFound("no symmetric equilibrium", path=bad,
                                  step=int(round(state.t / params.dt)),
                                  dg1_plus_z1=float(info["eq"]["a1"][bad]),
                                  dg2_plus_z2=float(info["eq"]["a2"][bad]))
    if scalar:
        new = MarketState(**{k: (float(v[0]) if isinstance(v, np.ndarray) else v)
                             for k, v in vars(new).items()})
        return new, (float(yp[0]), float(yq[0]))
    return new, (yp, yq)


TRAJECTORY_FIELDS = ("mu", "lam_p", "lam_q", "lam_a", "lam_b", "F_p", "F_q", "Y_p", "Y_q",
                     "int_F_p", "int_F_q")


@dataclass
class PathBatch:
    m: int
    P_cl: np.ndarray
    P_star: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x4: np.ndarray
    x5: np.ndarray
    x6: np.ndarray
    x7: np.ndarray
    Y_p: np.ndarray
    Y_q: np.ndarray
    g_p: np.ndarray
    g_q: np.ndarray
    penalty_p: np.ndarray
    penalty_q: np.ndarray
    int_F_p: np.ndarray
    int_F_q: np.ndarray
    failed_steps: np.ndarray
    mu_clipped_steps: np.ndarray
    lam_clipped_steps: np.ndarray
    t: np.ndarray | None = None
    trajectories: dict | None = None
    tape: list | None = field(default=None, repr=False)
    terminal_state: MarketState | None = field(default=None, repr=False)

    PATH_FIELDS = ("P_cl", "P_star", "x1", "x2", "x4", "x5", "x6", "x7", "Y_p", "Y_q", "g_p",
                   "g_q", "penalty_p", "penalty_q", "int_F_p", "int_F_q", "failed_steps",
                   "mu_clipped_steps", "lam_clipped_steps")

    @property
    def failed(self) -> np.ndarray:
        return self.failed_steps > 0

    @classmethod
    def concat(cls, batches) -> "PathBatch":
        batches = list(batches)
        kw = {f: np.concatenate([getattr(b, f) for b in batches]) for f in cls.PATH_FIELDS}
        traj = None
        if all(b.trajectories is not None for b in batches):
            traj = {k: np.concatenate([b.trajectories[k] for b in batches], axis=1)
                    for k in batches[0].trajectories}
        return cls(m=sum(b.m for b in batches), t=batches[0].t, trajectories=traj, **kw)


def _run_chunk(policy, params: ModelParams, paths, seed, purpose, index, d, record, strict,
               force_controls, keep_tape, replay):
    n = params.n_steps
    m = len(paths)
    normals, uniforms = draw_randomness(seed, paths, n, purpose, index)
    state = _initial_state(params, m)
    y_p = np.zeros(m)
    y_q = np.zeros(m)
    pen_p = np.zeros(m)
    pen_q = np.zeros(m)
    int_p = np.zeros(m)
    int_q = np.zeros(m)
    failed = np.zeros(m, dtype=np.int64)
    mu_clip = np.zeros(m, dtype=np.int64)
    lam_clip = np.zeros(m, dtype=np.int64)
    traj = None
    if record:
        traj = {k: np.empty((n + 1, m)) for k in TRAJECTORY_FIELDS}
        traj["z"] = np.empty((n + 1, m, 7))
    tape = [] if keep_tape else None
    dt = params.dt

    def log(k, info, yp, yq, ip, iq):
        traj["z"][k] = info["z"][:, :, 0]
        for name in ("mu", "lam_p", "lam_q", "lam_a", "lam_b", "F_p", "F_q"):
            traj[name][k] = info[name]
        traj["Y_p"][k], traj["Y_q"][k] = yp, yq
        traj["int_F_p"][k], traj["int_F_q"][k] = ip, iq

    for k in range(n):
        rnd = _step_randomness(normals, uniforms, k)
        counts = None if replay is None else replay[k]
        new, yp2, yq2, info = advance(state, y_p, y_q, policy, params, rnd, d, force_controls,
                                      counts)
        if not force_controls:
            bad = ~info["valid"]
            if strict and bad.any():
                j = int(np.flatnonzero(bad)[0])
                raise EquilibriumNotFound(
                    "no symmetric equilibrium", path=int(paths[j]), step=k,
                    dg1_plus_z1=float(info["eq"]["a1"][j]), dg2_plus_z2=float(info["eq"]["a2"][j]))
            failed += bad
            mu_clip += info["valid"] & ~info["eq"]["mu_free"]
            lam_clip += ~info["eq"]["lam_p_free"] | ~info["eq"]["lam_q_free"]
        if record:
            log(k, info, y_p, y_q, int_p, int_q)
        if keep_tape:
            tape.append(info)
        pen_p = pen_p + 0.5 * (info["lam_p"] - params.lambda0) ** 2 * dt
        pen_q = pen_q + 0.5 * (info["lam_q"] - params.lambda0) ** 2 * dt
        int_p = int_p + info["F_p"] * dt
        int_q = int_q + info["F_q"] * dt
        state, y_p, y_q = new, yp2, yq2

    if record:
        # controls at the closing instant, for the last row of the series
        s = cancellation_survival(0.0)
        end = _copy_state(state)
        end.r1 = params.v_a * (uniforms[n - 1][:, 4] <= s)
        end.r2 = params.v_b * (uniforms[n - 1][:, 5] <= s)
        u, _ = policy.outputs(observation(end.t, end, y_p, y_q), params)
        z = tie_symmetric(u)
        ctl = _controls(end, z, params.d if d is None else d, params, force_controls)
        log(n, dict(z=z, **ctl), y_p, y_q, int_p, int_q)

    num = clearing_numerator(state, params)
    den = clearing_denominator(state, params)
    return PathBatch(
        m=m, P_cl=num / den, P_star=state.x3.copy(), x1=state.x1, x2=state.x2, x4=state.x4,
        x5=state.x5, x6=state.x6, x7=state.x7, Y_p=y_p, Y_q=y_q,
        g_p=payoff_g("p", state, params), g_q=payoff_g("q", state, params),
        penalty_p=pen_p, penalty_q=pen_q, int_F_p=int_p, int_F_q=int_q,
        failed_steps=failed, mu_clipped_steps=mu_clip, lam_clipped_steps=lam_clip,
        t=dt * np.arange(n + 1), trajectories=traj, tape=tape, terminal_state=state,
    )


def simulate_batch(policy, params: ModelParams, m: int, seed: int, record_trajectories: bool = False,
                   d=None, purpose: int = PURPOSE_EVAL, index: int = 0, strict: bool = False,
                   force_controls: bool = False, keep_tape: bool = False, replay=None,
                   chunk: int = CHUNK) -> PathBatch:
    """Simulate m independent paths.

    Paths where Dg+z fails the sign condition at some step fall back to zero
    spreads there and are counted in `failed_steps`; with `strict` the first
    such (path, step) raises EquilibriumNotFound instead.  `keep_tape` and
    `replay` (frozen counts, as in ``[info["counts"] for info in tape]``) are
    used by the gradient code and require a single chunk.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if keep_tape or replay is not None:
        chunk = max(chunk, m)
    parts = []
    for start in range(0, m, chunk):
        paths = range(start, min(m, start + chunk))
        parts.append(_run_chunk(policy, params, paths, seed, purpose, index, d,
                                record_trajectories, strict, force_controls, keep_tape, replay))
    if len(parts) == 1:
        return parts[0]
    return PathBatch.concat(parts)
