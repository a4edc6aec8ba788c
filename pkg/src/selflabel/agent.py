"""Adaptive pseudo-label thresholds learned with a DDPG-style actor-critic.

The agent observes summary statistics of a fused probability map and its
current partition, emits a (tau_fg, tau_bg) pair, and is rewarded by the
change in three selection-quality scores: feature-space separability of
the selected classes, prediction/prior consistency, and pixel coverage,
minus a penalty for jittery thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .autodiff import (
    GradTape,
    Tensor,
    add_bias,
    concat,
    matmul,
    minimum,
    relu,
    sigmoid,
    slice_last,
    tmean,
)
from .calibration import agreement
from .optim import Adam, zero_grads
from .probmap import PixelPartition, class_ratios, mean_std

MIN_TAU_GAP = 0.05
# action box: thresholds at the extremes collapse one side of the selection
# to the empty set (no foreground above 0.97-ish once the fused map is
# clamped, no background below a few percent), and an empty class starves
# that side of the consistency loss for the rest of the run; the box keeps
# every reachable action non-degenerate while leaving the useful range free
TAU_FG_RANGE = (0.50, 0.92)
TAU_BG_RANGE = (0.02, 0.45)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class RlState:
    """Six summary statistics the agent conditions on."""

    mu: float
    sigma: float
    r_pos: float
    r_neg: float
    r_ign: float
    w_agree: float

    def __post_init__(self):
        for name in ("mu", "r_pos", "r_neg", "r_ign", "w_agree"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")
        if not 0.0 <= self.sigma <= 0.5:
            raise ValueError(f"sigma={self.sigma} outside [0,0.5]")
        if abs(self.r_pos + self.r_neg + self.r_ign - 1.0) > 1e-9:
            raise ValueError("partition ratios must sum to 1")

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.mu, self.sigma, self.r_pos, self.r_neg, self.r_ign, self.w_agree],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class ThresholdAction:
    tau_fg: float
    tau_bg: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.tau_fg, self.tau_bg], dtype=np.float64)


@dataclass(frozen=True)
class QualityMetrics:
    m_sep: float
    k_cons: float
    c_cov: float

    def __post_init__(self):
        for name in ("m_sep", "k_cons", "c_cov"):
            v = getattr(self, name)
            if not -1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [0,1]")


@dataclass(frozen=True)
class RpleConfig:
    w_m: float = 1.0
    w_k: float = 0.4
    w_c: float = 0.08
    w_stab: float = 0.05
    delta: float = 0.5
    gamma: float = 0.9
    soft_update: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    explore_noise: float = 0.01
    beta_temp: float = 1.0
    hidden: int = 64
    init_tau_fg: float = 0.70
    init_tau_bg: float = 0.20
    replay_capacity: int = 4096
    batch: int = 64

    def __post_init__(self):
        for name in ("w_m", "w_k", "w_c", "w_stab", "delta", "actor_lr",
                     "critic_lr", "beta_temp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0,1)")
        if not 0.0 <= self.soft_update <= 1.0:
            raise ValueError("soft_update must lie in [0,1]")
        if self.replay_capacity < 1 or self.batch < 1:
            raise ValueError("replay_capacity and batch must be >= 1")


# ---------------------------------------------------------------------------
# state, action projection, and reward pieces


def build_state(fused, part: PixelPartition, pw) -> RlState:
    mu, sigma = mean_std(fused)
    r_pos, r_neg, r_ign = class_ratios(part)
    w = agreement(pw, fused)
    return RlState(mu=mu, sigma=sigma, r_pos=r_pos, r_neg=r_neg, r_ign=r_ign, w_agree=w)


def project_action(raw) -> ThresholdAction:
    """Clip the thresholds into the action box and order them: keep tau_fg,
    pull tau_bg at least 0.05 below it."""
    tau_fg = float(np.clip(raw[0], *TAU_FG_RANGE))
    tau_bg = float(np.clip(raw[1], *TAU_BG_RANGE))
    tau_bg = max(TAU_BG_RANGE[0], min(tau_bg, tau_fg - MIN_TAU_GAP))
    return ThresholdAction(tau_fg=tau_fg, tau_bg=tau_bg)


def separability(features: np.ndarray, part: PixelPartition, beta: float = 1.0) -> float:
    """Mean sigmoid margin of selected pixels against the two class centroids.

    ``features`` is (D, H, W).  Centroids are the l2-normalized sums of the
    selected foreground / background feature vectors; an empty class
    contributes a zero centroid, and an empty selection scores a neutral 0.5.
    """
    d = features.shape[0]
    if features.shape[1:] != part.labels.shape:
        raise ValueError(
            f"feature grid {features.shape[1:]} != partition {part.labels.shape}")
    flat = features.reshape(d, -1).T  # (N, D)
    fg = part.fg.reshape(-1)
    bg = part.bg.reshape(-1)
    if not fg.any() and not bg.any():
        return 0.5

    def centroid(mask):
        if not mask.any():
            return np.zeros(d)
        s = flat[mask].sum(axis=0)
        n = np.linalg.norm(s)
        return s / n if n > 0 else s

    c_fg = centroid(fg)
    c_bg = centroid(bg)
    margins = []
    if fg.any():
        margins.append(flat[fg] @ c_fg - flat[fg] @ c_bg)
    if bg.any():
        margins.append(flat[bg] @ c_bg - flat[bg] @ c_fg)
    m = np.concatenate(margins)
    return float(np.mean(expit(beta * m)))


def consistency(pw, fused, part: PixelPartition) -> float:
    """Mean agreement 1 - |pw - fused| over the selected pixels (0.5 if none)."""
    from .probmap import _values

    a = _values(pw)
    b = _values(fused)
    if a.shape != b.shape or a.shape != part.labels.shape:
        raise ValueError("pw, fused, and partition shapes must match")
    sel = part.selected
    if not sel.any():
        return 0.5
    return float(np.mean(1.0 - np.abs(a[sel] - b[sel])))


def coverage(part: PixelPartition) -> float:
    r_pos, r_neg, _ = class_ratios(part)
    return r_pos + r_neg


def instructional_gain(prev: QualityMetrics, cur: QualityMetrics,
                       prev_a: ThresholdAction, cur_a: ThresholdAction,
                       cfg: RpleConfig) -> float:
    p_stab = cfg.w_stab * (abs(cur_a.tau_fg - prev_a.tau_fg)
                           + abs(cur_a.tau_bg - prev_a.tau_bg))
    return (cfg.w_m * (cur.m_sep - prev.m_sep)
            + cfg.w_k * (cur.k_cons - prev.k_cons)
            + cfg.w_c * (cur.c_cov - prev.c_cov)
            - p_stab)


def clip_reward(gain: float, delta: float) -> float:
    return float(np.clip(gain, -delta, delta))


def td_target(r, next_s, agent: "ThresholdAgent", gamma: float):
    """Bootstrapped target r + gamma * Q'(s', pi'(s')) using the frozen target
    nets; accepts a scalar or a batch."""
    r = np.asarray(r, dtype=np.float64)
    s2 = _state_batch(next_s)
    a2 = agent.target_policy(s2)
    q2 = agent.target_value(s2, a2)
    return r + gamma * q2.reshape(r.shape)


def _state_batch(s) -> np.ndarray:
    if isinstance(s, RlState):
        return s.as_vector()[None, :]
    arr = np.asarray(s, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


# ---------------------------------------------------------------------------
# networks


class _MLP:
    """Plain fully-connected stack over the autodiff tensors."""

    def __init__(self, sizes, rng, head: str, final_w_zero=False, final_bias=None):
        self.head = head
        self.layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and final_w_zero:
                w = np.zeros((n_in, n_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
            b = np.zeros(n_out)
            if last and final_bias is not None:
                b = np.asarray(final_bias, dtype=np.float64).copy()
            self.layers.append((Tensor(w, requires_grad=True),
                                Tensor(b, requires_grad=True)))

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = add_bias(matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = relu(h)
        return sigmoid(h) if self.head == "sigmoid" else h

    def params(self):
        out = []
        for w, b in self.layers:
            out.extend([w, b])
        return out

    def named(self, prefix: str):
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{prefix}.l{i}.w", w))
            out.append((f"{prefix}.l{i}.b", b))
        return out


def _soft_update(target: _MLP, online: _MLP, rho: float):
    for (tw, tb), (ow, ob) in zip(target.layers, online.layers):
        tw.data = rho * ow.data + (1.0 - rho) * tw.data
        tb.data = rho * ob.data + (1.0 - rho) * tb.data


def _project_tensor(raw: Tensor) -> Tensor:
    """Differentiable version of project_action on a (B,2) tensor."""
    t_fg = slice_last(raw, 0, 1)
    t_bg = slice_last(raw, 1, 2)
    t_bg = relu(minimum(t_bg, t_fg - MIN_TAU_GAP))
    return concat(t_fg, t_bg)


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._s = np.zeros((capacity, 6))
        self._a = np.zeros((capacity, 2))
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, 6))
        self._size = 0
        self._cursor = 0

    def __len__(self):
        return self._size

    def push(self, s, a, r, s2):
        i = self._cursor
        self._s[i] = s.as_vector() if isinstance(s, RlState) else s
        self._a[i] = a.as_vector() if isinstance(a, ThresholdAction) else a
        self._r[i] = r
        self._s2[i] = s2.as_vector() if isinstance(s2, RlState) else s2
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self._size, size=batch)
        return self._s[idx], self._a[idx], self._r[idx], self._s2[idx]


# ---------------------------------------------------------------------------
# the agent


class ThresholdAgent:
    """DDPG actor-critic over the 6-d selection state.

    The actor's final layer starts at zero weights with bias set to the
    logits of the initial thresholds, so the very first greedy action is
    exactly (init_tau_fg, init_tau_bg).
    """

    def __init__(self, cfg: RpleConfig = RpleConfig(), seed: int = 0):
        self.cfg = cfg
        self._rng = np.random.default_rng(seed)
        h = cfg.hidden
        bias = [float(logit(cfg.init_tau_fg)), float(logit(cfg.init_tau_bg))]
        self.actor = _MLP([6, h, h, 2], self._rng, head="sigmoid",
                          final_w_zero=True, final_bias=bias)
        self.critic = _MLP([8, h, h, 1], self._rng, head="linear")
        self.target_actor = _MLP([6, h, h, 2], self._rng, head="sigmoid",
                                 final_w_zero=True, final_bias=bias)
        self.target_critic = _MLP([8, h, h, 1], self._rng, head="linear")
        _soft_update(self.target_actor, self.actor, 1.0)
        _soft_update(self.target_critic, self.critic, 1.0)
        self.actor_opt = Adam(self.actor.params(), lr=cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params(), lr=cfg.critic_lr)
        self.replay = ReplayBuffer(cfg.replay_capacity)

    # ---- acting

    def act(self, s, explore: bool = False) -> ThresholdAction:
        x = Tensor(_state_batch(s))
        raw = self.actor.forward(x).data[0]
        if explore:
            raw = raw + self._rng.normal(0.0, self.cfg.explore_noise, size=2)
        return project_action(raw)

    def target_policy(self, states: np.ndarray) -> np.ndarray:
        raw = self.target_actor.forward(Tensor(states))
        return _project_tensor(raw).data

    def target_value(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        q = self.target_critic.forward(Tensor(np.concatenate([states, actions], axis=1)))
        return q.data.reshape(-1)

    # ---- experience and learning

    def record(self, s, a, r, s2):
        self.replay.push(s, a, r, s2)

    def update(self) -> dict:
        if len(self.replay) < self.cfg.batch:
            return {"skipped": True, "critic_loss": float("nan")}
        s, a, r, s2 = self.replay.sample(self.cfg.batch, self._rng)
        stats = self.train_batch(s, a, r, s2)
        stats["skipped"] = False
        return stats

    def train_batch(self, s, a, r, s2) -> dict:
        y = td_target(r, s2, self, self.cfg.gamma)

        # critic regression toward the bootstrapped targets
        all_params = self.actor.params() + self.critic.params()
        zero_grads(all_params)
        with GradTape() as tape:
            q = self.critic.forward(Tensor(np.concatenate([s, a], axis=1)))
            err = q - Tensor(y.reshape(-1, 1))
            critic_loss = tmean(err * err)
            tape.backward(critic_loss)
        self.critic_opt.step()

        # actor ascends the critic's value of its own (projected) action
        zero_grads(all_params)
        with GradTape() as tape:
            st = Tensor(s)
            action = _project_tensor(self.actor.forward(st))
            q_pi = self.critic.forward(concat(st, action))
            actor_obj = tmean(q_pi)
            tape.backward(actor_obj * -1.0)
        self.actor_opt.step()

        _soft_update(self.target_actor, self.actor, self.cfg.soft_update)
        _soft_update(self.target_critic, self.critic, self.cfg.soft_update)
        return {"critic_loss": float(critic_loss.data),
                "actor_value": float(actor_obj.data)}

    # ---- persistence

    def named_params(self):
        return (self.actor.named("actor") + self.critic.named("critic")
                + self.target_actor.named("target_actor")
                + self.target_critic.named("target_critic"))

    def state_arrays(self):
        return [(name, t.data) for name, t in self.named_params()]

    def load_state(self, arrays: dict):
        named = dict(self.named_params())
        if set(arrays) != set(named):
            missing = set(named) - set(arrays)
            extra = set(arrays) - set(named)
            raise ValueError(f"parameter names differ (missing={sorted(missing)}, "
                             f"extra={sorted(extra)})")
        for name, t in named.items():
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            t.data = arrays[name].astype(np.float64)
