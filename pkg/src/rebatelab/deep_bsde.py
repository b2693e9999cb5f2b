"""Neural rebate policy, its loss and a hand-written adjoint of the whole simulation.

The policy is a 12 -> 8 -> 7 sigmoid network whose outputs, scaled by 20,
are tied into a symmetric Z matrix.  Gradients are computed by reverse-mode
sweeps over the simulation tape with the jump and survivor counts frozen.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .contract import MAKER_COL, untie_symmetric_grad
from .model import JumpKind, ModelParams, g_from_parts, g_partials, jump_parts
from .simulation import PURPOSE_TRAIN, simulate_batch

log = logging.getLogger(__name__)

OUTPUT_SCALE = 20.0
FEATURE_NAMES = ("t", "x1", "x2", "x3", "x4", "x5", "x6", "x7", "Y_p", "Y_q", "p_p", "p_q")
LEARNING_RATES = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)
CHECKPOINT_MAGIC = "rebatelab-policy 1"


class TrainingDiverged(RuntimeError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class FeatureScales:
    """Affine normalization constants, all derived from ModelParams."""

    T: float
    P0: float
    count: float   # lambda0 * T
    price: float   # sigma * sqrt(T)
    value: float   # count * price

    @classmethod
    def from_params(cls, params: ModelParams) -> "FeatureScales":
        count = max(params.lambda0 * params.T, 1.0)
        price = params.sigma * np.sqrt(params.T)
        return cls(T=params.T, P0=params.P0_star, count=count, price=price, value=count * price)

    def to_dict(self) -> dict:
        return asdict(self)


def features(obs: dict, sc: FeatureScales) -> np.ndarray:
    """(m, 12) normalized inputs in FEATURE_NAMES order."""
    P0 = sc.P0
    cols = [
        obs["t"] / sc.T,
        obs["x1"] / sc.count,
        obs["x2"] / sc.count,
        (obs["x3"] - P0) / sc.price,
        (obs["x4"] - P0 * obs["x5"]) / sc.value,
        obs["x5"] / sc.count,
        (obs["x6"] - P0 * obs["x7"]) / sc.value,
        obs["x7"] / sc.count,
        obs["Y_p"] / sc.value,
        obs["Y_q"] / sc.value,
        (obs["p_p"] - P0) / sc.price,
        (obs["p_q"] - P0) / sc.price,
    ]
    return np.stack([np.broadcast_to(np.asarray(c, float), np.shape(obs["x1"])) for c in cols],
                    axis=-1)


def features_backward(fbar: np.ndarray, sc: FeatureScales) -> dict:
    """Gradient on the policy-dependent observations from a gradient on the features."""
    return dict(
        x4=fbar[:, 4] / sc.value,
        x6=fbar[:, 6] / sc.value,
        Y_p=fbar[:, 8] / sc.value,
        Y_q=fbar[:, 9] / sc.value,
        p_p=fbar[:, 10] / sc.price,
        p_q=fbar[:, 11] / sc.price,
    )


class PolicyNetwork:
    """input -> 8 sigmoid -> 7 sigmoid, times OUTPUT_SCALE."""

    def __init__(self, sizes=(12, 8, 7), seed: int | None = 0, init_range: float = 0.5):
        self.sizes = tuple(int(s) for s in sizes)
        n_in, n_h, n_out = self.sizes
        rng = np.random.default_rng(seed)
        self.W1 = rng.uniform(-init_range, init_range, (n_h, n_in))
        self.b1 = rng.uniform(-init_range, init_range, n_h)
        self.W2 = rng.uniform(-init_range, init_range, (n_out, n_h))
        self.b2 = rng.uniform(-init_range, init_range, n_out)

    @classmethod
    def zeros(cls, sizes=(12, 8, 7)) -> "PolicyNetwork":
        net = cls(sizes, seed=0)
        net.set_flat(np.zeros(net.n_params))
        return net

    # flat layout: W1 (row-major), b1, W2 (row-major), b2
    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        i = 0
        for name in ("W1", "b1", "W2", "b2"):
            arr = getattr(self, name)
            setattr(self, name, theta[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def copy(self) -> "PolicyNetwork":
        net = PolicyNetwork(self.sizes, seed=0)
        net.set_flat(self.flat())
        return net

    def forward(self, f, return_cache: bool = False):
        f = np.atleast_2d(np.asarray(f, dtype=float))
        h = _sigmoid(f @ self.W1.T + self.b1)
        o = _sigmoid(h @ self.W2.T + self.b2)
        u = OUTPUT_SCALE * o
        if return_cache:
            return u, (f, h, o)
        return u

    def backward(self, cache, ubar):
        """Returns (flat parameter gradient, gradient on the inputs)."""
        f, h, o = cache
        a2 = ubar * OUTPUT_SCALE * o * (1.0 - o)
        gW2 = a2.T @ h
        gb2 = a2.sum(axis=0)
        a1 = (a2 @ self.W2) * h * (1.0 - h)
        gW1 = a1.T @ f
        gb1 = a1.sum(axis=0)
        fbar = a1 @ self.W1
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2]), fbar

    def save(self, path) -> None:
        """Text checkpoint: magic line, layer sizes, then one parameter per line."""
        with open(path, "w") as fh:
            fh.write(CHECKPOINT_MAGIC + "\n")
            fh.write(" ".join(str(s) for s in self.sizes) + "\n")
            for v in self.flat():
                fh.write(f"{v:.17g}\n")

    @classmethod
    def load(cls, path) -> "PolicyNetwork":
        with open(path) as fh:
            lines = fh.read().split("\n")
        if lines[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a policy checkpoint")
        net = cls(tuple(int(s) for s in lines[1].split()), seed=0)
        net.set_flat([float(v) for v in lines[2:] if v.strip()])
        return net


class NetworkPolicy:
    """Adapter giving the simulator raw outputs u = 20 * net(features)."""

    def __init__(self, net: PolicyNetwork, params: ModelParams):
        self.net = net
        self.scales = FeatureScales.from_params(params)

    def outputs(self, obs, params):
        return self.net.forward(features(obs, self.scales), return_cache=True)

    def backward(self, cache, ubar):
        grad, fbar = self.net.backward(cache, ubar)
        return grad, features_backward(fbar, self.scales)


def forward(net: PolicyNetwork, feats) -> np.ndarray:
    return net.forward(feats)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    iterations: int = 200
    batch_size: int = 256
    epsilon: float | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    failure_penalty: float = 1000.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class LossParts:
    total: float
    objective: float
    penalty_p: float
    penalty_q: float
    failure: float
    active_p: bool
    active_q: bool


def loss(batch, d, params: ModelParams, epsilon=None, failure_penalty: float = 0.0) -> LossParts:
    """mean(|P^cl - P*|^2 + Y^p + Y^q - d(x1 + x2)) + reservation penalties + failure term."""
    eps = params.epsilon if epsilon is None else epsilon
    objective = float(np.mean((batch.P_cl - batch.P_star) ** 2 + batch.Y_p + batch.Y_q
                              - d * (batch.x1 + batch.x2)))
    short_p = -float(np.mean(batch.g_p + batch.Y_p - batch.penalty_p))
    short_q = -float(np.mean(batch.g_q + batch.Y_q - batch.penalty_q))
    pen_p = eps * max(short_p, 0.0)
    pen_q = eps * max(short_q, 0.0)
    fail = failure_penalty * float(np.mean(batch.failed_steps > 0))
    return LossParts(objective + pen_p + pen_q + fail, objective, pen_p, pen_q, fail,
                     short_p > 0, short_q > 0)


def _g_backward(maker, st, dgbar, params: ModelParams):
    """Adjoint of the four payoff increments of `maker` onto (x4, x6, p_p, p_q)."""
    K = params.Kp if maker == "p" else params.Kq
    num0 = st.x1 - st.x2 + params.Kp * st.x4 + params.Kq * st.x6 + params.K0 * params.P0_star
    den0 = params.Kp * st.x5 + params.Kq * st.x7 + params.K0
    count0, w0 = (st.x5, st.x4) if maker == "p" else (st.x7, st.x6)
    dnum0, dw0 = g_partials(num0, den0, st.x3, count0, w0, K)
    gbar_before = -sum(dgbar)
    numbar = gbar_before * dnum0
    wbar = gbar_before * dw0
    ppbar = 0.0
    pqbar = 0.0
    for bar, kind in zip(dgbar, JumpKind):
        num, den, count, w = jump_parts(maker, kind, st, params)
        dnum, dw = g_partials(num, den, st.x3, count, w, K)
        numbar = numbar + bar * dnum
        wbar = wbar + bar * dw
        if kind is JumpKind.MAKER_P:
            ppbar = ppbar + bar * dnum * params.Kp + (bar * dw if maker == "p" else 0.0)
        elif kind is JumpKind.MAKER_Q:
            pqbar = pqbar + bar * dnum * params.Kq + (bar * dw if maker == "q" else 0.0)
    x4bar = params.Kp * numbar + (wbar if maker == "p" else 0.0)
    x6bar = params.Kq * numbar + (wbar if maker == "q" else 0.0)
    return x4bar, x6bar, ppbar, pqbar


def backprop(batch, policy: NetworkPolicy, d, params: ModelParams, epsilon=None) -> np.ndarray:
    """Gradient of `loss` with respect to the network's flat parameters.

    Requires a batch simulated with keep_tape=True.  Jump and survivor counts
    and the equilibrium branch (interior, clipped or fallback) are held fixed.
    """
    if batch.tape is None:
        raise ValueError("batch has no tape; simulate with keep_tape=True")
    eps = params.epsilon if epsilon is None else epsilon
    M = batch.m
    dt, sig, lam0, c = params.dt, params.sigma, params.lambda0, params.c
    st = batch.terminal_state
    parts = loss(batch, d, params, eps)
    a_p = eps * parts.active_p / M
    a_q = eps * parts.active_q / M

    num = st.x1 - st.x2 + params.Kp * st.x4 + params.Kq * st.x6 + params.K0 * params.P0_star
    den = params.Kp * st.x5 + params.Kq * st.x7 + params.K0
    dnum_p, dw_p = g_partials(num, den, st.x3, st.x5, st.x4, params.Kp)
    dnum_q, dw_q = g_partials(num, den, st.x3, st.x7, st.x6, params.Kq)
    numbar = 2.0 * (num / den - st.x3) / den / M - a_p * dnum_p - a_q * dnum_q
    X4 = params.Kp * numbar - a_p * dw_p
    X6 = params.Kq * numbar - a_q * dw_q
    PP = np.zeros(M)
    PQ = np.zeros(M)
    YP = np.full(M, 1.0 / M - a_p)
    YQ = np.full(M, 1.0 / M - a_q)
    PENP = np.full(M, a_p)
    PENQ = np.full(M, a_q)
    grad = np.zeros(policy.net.n_params)

    for info in reversed(batch.tape):
        s = info["state"]
        z = info["z"]
        mu = info["mu"]
        n_a, n_b, n_p, n_q = info["counts"][:, :4].T
        dW, dBp, dBq = info["brownian"]
        lam_p, lam_q, lam_a, lam_b = info["lam_p"], info["lam_q"], info["lam_a"], info["lam_b"]
        eq = info["eq"]

        x4b, x6b = X4.copy(), X6.copy()
        ppb, pqb = PP.copy(), PQ.copy()
        mub = (PP + PQ) * dt
        ppb += X4 * n_p
        pqb += X6 * n_q
        lampb = PENP * (lam_p - lam0) * dt
        lamqb = PENQ * (lam_q - lam0) * dt
        lamab = np.zeros(M)
        lambb = np.zeros(M)
        zb = np.zeros_like(z)
        dgb = {"p": [np.zeros(M) for _ in range(4)], "q": [np.zeros(M) for _ in range(4)]}

        rates = (lam_a, lam_b, lam_p, lam_q)
        for maker, Ybar in (("p", YP), ("q", YQ)):
            col = MAKER_COL[maker]
            drivers = (n_a - lam0 * dt, n_b - lam0 * dt, dW, n_p - lam0 * dt,
                       dBp - mu * dt / sig, n_q - lam0 * dt, dBq - mu * dt / sig)
            for row, drv in enumerate(drivers):
                zb[:, row, col] += Ybar * drv
            mub = mub - Ybar * (z[:, 4, col] + z[:, 6, col]) * dt / sig
            Fb = -Ybar * dt
            dg = info["dg_p"] if maker == "p" else info["dg_q"]
            rb = [Fb * (dg[k] + z[:, row, col]) for k, row in enumerate((0, 1, 3, 5))]
            for k, row in enumerate((0, 1, 3, 5)):
                dgb[maker][k] += Fb * rates[k]
                zb[:, row, col] += Fb * (rates[k] - lam0)
            own = lam_p if maker == "p" else lam_q
            if maker == "p":
                rb[2] = rb[2] - Fb * (own - lam0)
            else:
                rb[3] = rb[3] - Fb * (own - lam0)
            lamab += rb[0]
            lambb += rb[1]
            lampb += rb[2]
            lamqb += rb[3]
            zb[:, 4, col] -= Fb * mu / sig
            zb[:, 6, col] -= Fb * mu / sig
            mub = mub - Fb * (z[:, 4, col] + z[:, 6, col]) / sig

        mub = mub + lamab * (-2.0 * c * lam_a) + lambb * (2.0 * c * lam_b)

        # equilibrium map
        live = eq["valid"] & eq["mu_free"]
        gam = np.where(live, eq["gamma"], 1.0)
        sq = np.where(live, eq["s"], 1.0)
        gb = np.where(live, mub / (2.0 * c * gam), 0.0)
        A = eq["A"]
        a1b = (gb / sq) * (-c * A)
        a2b = (-gam * gam / sq * gb) * (-c * A)
        ztb = (-gam / sq * gb) / sig
        for maker in ("p", "q"):
            dgb[maker][0] += 0.5 * a1b
            dgb[maker][1] += 0.5 * a2b
        zb[:, 0, :] += 0.5 * a1b[:, None]
        zb[:, 1, :] += 0.5 * a2b[:, None]
        zb[:, 4, 0] += 0.5 * ztb
        zb[:, 6, 1] += 0.5 * ztb
        lpb = np.where(eq["lam_p_free"], lampb, 0.0)
        lqb = np.where(eq["lam_q_free"], lamqb, 0.0)
        zb[:, 3, 0] += lpb
        dgb["p"][2] += lpb
        zb[:, 5, 1] += lqb
        dgb["q"][3] += lqb

        for maker in ("p", "q"):
            a, b, e, f = _g_backward(maker, s, dgb[maker], params)
            x4b += a
            x6b += b
            ppb += e
            pqb += f

        g_theta, obs_bar = policy.backward(info["cache"], untie_symmetric_grad(zb))
        grad += g_theta
        X4 = x4b + obs_bar["x4"]
        X6 = x6b + obs_bar["x6"]
        PP = ppb + obs_bar["p_p"]
        PQ = pqb + obs_bar["p_q"]
        YP = YP + obs_bar["Y_p"]
        YQ = YQ + obs_bar["Y_q"]
    return grad


def loss_and_grad(net: PolicyNetwork, params: ModelParams, d, m, seed, index=0, epsilon=None,
                  failure_penalty: float = 0.0, replay=None):
    policy = NetworkPolicy(net, params)
    batch = simulate_batch(policy, params, m, seed, d=d, purpose=PURPOSE_TRAIN, index=index,
                           keep_tape=True, replay=replay)
    parts = loss(batch, d, params, epsilon, failure_penalty)
    return parts, backprop(batch, policy, d, params, epsilon), batch


def frozen_loss(net: PolicyNetwork, params: ModelParams, d, m, seed, replay, index=0,
                epsilon=None) -> float:
    """Loss with the jump counts of `replay`, for finite-difference checks."""
    policy = NetworkPolicy(net, params)
    batch = simulate_batch(policy, params, m, seed, d=d, purpose=PURPOSE_TRAIN, index=index,
                           replay=replay)
    return loss(batch, d, params, epsilon).total


class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    net: PolicyNetwork
    losses: list = field(default_factory=list)
    failed_paths: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "failed_paths"])
            for i, (l, f) in enumerate(zip(self.losses, self.failed_paths)):
                w.writerow([i, repr(float(l)), int(f)])


def train(params: ModelParams, config: TrainConfig, d=None, net: PolicyNetwork | None = None,
          callback=None) -> TrainResult:
    """Adam on the simulated loss; iteration j uses training stream (config.seed, j)."""
    d = params.d if d is None else d
    net = PolicyNetwork(seed=config.seed) if net is None else net.copy()
    opt = Adam(net.n_params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    out = TrainResult(net)
    for j in range(config.iterations):
        parts, grad, batch = loss_and_grad(net, params, d, config.batch_size, config.seed, j,
                                           config.epsilon, config.failure_penalty)
        if not (np.isfinite(parts.total) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {j}")
        out.losses.append(parts.total)
        out.failed_paths.append(int(np.sum(batch.failed_steps > 0)))
        net.set_flat(opt.step(net.flat(), grad))
        if callback is not None:
            callback(j, parts)
        if j % 50 == 0:
            log.debug("iter %d loss %.4f failed %d", j, parts.total, out.failed_paths[-1])
    return out
