"""Proximal policy optimization with generalized advantage estimation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nets import Adam
from .policies import GaussianPolicy, ObsNormalizer
from .rewards import gait_adherence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    num_envs: int = 256
    steps_per_iteration: int = 48
    clip_ratio: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_episode_steps: int = 1000
    learning_rate: float = 3e-4
    max_grad_norm: float = 1.0
    desired_kl: float | None = None  # adapt the learning rate toward this KL when set

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.epochs < 1 or self.minibatches < 1 or self.steps_per_iteration < 1:
            raise ValueError("epochs, minibatches and steps must be positive")
        if self.clip_ratio <= 0:
            raise ValueError("clip ratio must be positive")


@dataclass
class RolloutBuffer:
    """Per-step, per-env arrays with a leading (steps, envs) shape."""

    obs: dict
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    timeouts: np.ndarray
    amp_before: np.ndarray
    amp_after: np.ndarray
    last_values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_envs(self) -> int:
        return self.rewards.shape[1]


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Advantages and returns by the backward GAE recursion; arrays are (T, N)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    notdone = 1.0 - np.asarray(dones, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_values = np.asarray(last_values, dtype=float)
    running = np.zeros_like(next_values)
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_values * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_values = values[t]
    return adv, adv + values


def normalize_advantages(adv, eps: float = 1e-8):
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + eps)


def collect_rollout(policy: GaussianPolicy, critic, env, steps: int, rng: np.random.Generator,
                    normalizer: ObsNormalizer | None = None, gamma: float = 0.99,
                    deterministic: bool = False, style_fn=None) -> RolloutBuffer:
    """Step ``env`` for ``steps`` control steps with actions sampled from ``policy``.

    Time-outs are bootstrapped by adding ``gamma * V(final obs)`` to the
    last reward. Stored observations are already normalized.
    """
    norm = normalizer or (lambda o: o)
    raw = env.observe()
    if normalizer is not None:
        normalizer.update(raw)
    obs = norm(raw)
    keys = list(obs)
    n = env.n
    buf_obs = {k: np.empty((steps, n, obs[k].shape[1]), dtype=np.float32) for k in keys}
    A = env.model.action_dim
    actions = np.empty((steps, n, A))
    logp = np.empty((steps, n))
    values = np.empty((steps, n))
    rewards = np.empty((steps, n))
    dones = np.zeros((steps, n), bool)
    timeouts = np.zeros((steps, n), bool)
    D = env.model.amp_dim
    amp_b = np.empty((steps, n, D))
    amp_a = np.empty((steps, n, D))
    term_sums: dict = {}
    adherence = []
    finished_tracking = []
    style_lo, style_hi, style_sum = np.inf, -np.inf, 0.0
    for t in range(steps):
        for k in keys:
            buf_obs[k][t] = obs[k]
        a, lp, _ = policy.act(obs, rng, deterministic)
        v = critic(obs).astype(float)
        raw, r, d, info = env.step(a, style_fn=style_fn)
        r = np.array(r, dtype=float)
        if info["timeout"].any():
            term_obs = norm(info["terminal_obs"])
            r[info["timeout"]] += gamma * critic(term_obs).astype(float)[info["timeout"]]
        actions[t], logp[t], values[t], rewards[t] = a, lp, v, r
        dones[t], timeouts[t] = d, info["timeout"]
        amp_b[t], amp_a[t] = info["amp_before"], info["amp_after"]
        for name, val in info["breakdown"].raw.items():
            term_sums[name] = term_sums.get(name, 0.0) + float(np.mean(val))
        adherence.append(gait_adherence(info["contacts"], info["desired_contact"]))
        style = info["breakdown"].raw.get("style")
        if style is not None:
            style_lo, style_hi = min(style_lo, float(style.min())), max(style_hi, float(style.max()))
            style_sum += float(style.mean())
        if d.any():
            finished_tracking += info["episode_tracking"][d].tolist()
        if normalizer is not None:
            normalizer.update(raw)
        obs = norm(raw)
    last_values = critic(obs).astype(float)
    stats = {f"raw/{k}": v / steps for k, v in term_sums.items()}
    stats["reward"] = float(rewards.mean())
    stats["adherence"] = float(np.mean(np.asarray(adherence) > 0.8))
    stats["episodes"] = int(dones.sum())
    if np.isfinite(style_lo):
        stats.update(style_min=style_lo, style_max=style_hi, style_mean=style_sum / steps)
    if finished_tracking:
        stats["episode_lin_tracking"] = float(np.mean(finished_tracking))
    return RolloutBuffer(buf_obs, actions, logp, values, rewards, dones, timeouts, amp_b, amp_a,
                         last_values, stats=stats)


def surrogate_grads(ratio, adv, clip: float):
    """Clipped-surrogate objective and its derivative w.r.t. the log-probability."""
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    obj = np.minimum(ratio * adv, clipped * adv)
    # the unclipped branch carries the gradient whenever it is the minimum
    active = ratio * adv <= clipped * adv
    return obj, np.where(active, ratio * adv, 0.0)


def policy_gradients(policy: GaussianPolicy, obs, actions, old_logp, adv, clip: float,
                     entropy_coef: float):
    """Loss terms and parameter gradients of ``-surrogate - c_e * entropy`` (batch mean)."""
    mu, cache = policy.actor.forward(obs)
    mu64 = mu.astype(np.float64)
    logp = policy.log_prob(mu64, actions)
    ratio = np.exp(logp - old_logp)
    obj, d_obj_d_logp = surrogate_grads(ratio, adv, clip)
    B = actions.shape[0]
    g_logp = -d_obj_d_logp / B  # d loss / d logp per sample
    ls = policy.log_std.astype(np.float64)
    inv_var = np.exp(-2 * ls)
    diff = actions - mu64
    d_mu = g_logp[:, None] * diff * inv_var
    d_logstd = np.sum(g_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - entropy_coef
    grads = policy.actor.backward(cache, d_mu.astype(mu.dtype))
    grads.append(d_logstd.astype(policy.log_std.dtype))
    kl = float(np.mean((ratio - 1.0) - (logp - old_logp)))
    stats = {"surrogate": float(obj.mean()), "kl": kl, "clip_fraction": float(np.mean(np.abs(ratio - 1) > clip)),
             "entropy": policy.entropy()}
    return -float(obj.mean()) - entropy_coef * stats["entropy"], grads, stats


def ppo_update(policy: GaussianPolicy, critic, buffer: RolloutBuffer, config: PpoConfig,
               policy_opt: Adam, critic_opt: Adam, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch updates on the clipped objective and value MSE."""
    if buffer.advantages is None:
        buffer.advantages, buffer.returns = compute_gae(buffer.rewards, buffer.values, buffer.dones,
                                                        buffer.last_values, config.gamma, config.lam)
    T, N = buffer.steps, buffer.num_envs
    total = T * N
    flat_obs = {k: v.reshape(total, -1) for k, v in buffer.obs.items()}
    actions = buffer.actions.reshape(total, -1)
    old_logp = buffer.log_probs.reshape(total)
    adv = normalize_advantages(buffer.advantages.reshape(total))
    returns = buffer.returns.reshape(total)
    mb = max(1, total // config.minibatches)
    acc = {"policy_loss": 0.0, "value_loss": 0.0, "kl": 0.0, "clip_fraction": 0.0}
    updates = skipped = 0
    for _ in range(config.epochs):
        perm = rng.permutation(total)
        for start in range(0, total, mb):
            idx = perm[start:start + mb]
            if idx.size < mb // 2:
                continue
            o = {k: v[idx] for k, v in flat_obs.items()}
            loss_pi, g_pi, st = policy_gradients(policy, o, actions[idx], old_logp[idx], adv[idx],
                                                 config.clip_ratio, config.entropy_coef)
            v, vcache = critic.forward(o)
            err = v.astype(np.float64) - returns[idx]
            loss_v = config.value_coef * float(np.mean(err * err))
            if not (np.isfinite(loss_pi) and np.isfinite(loss_v)):
                skipped += 1
                log.warning("ppo: non-finite loss, minibatch skipped")
                continue
            g_v = critic.backward(vcache, (2.0 * config.value_coef * err / idx.size).astype(v.dtype))
            policy_opt.step(g_pi)
            critic_opt.step(g_v)
            updates += 1
            acc["policy_loss"] += loss_pi
            acc["value_loss"] += loss_v
            acc["kl"] += st["kl"]
            acc["clip_fraction"] += st["clip_fraction"]
            if config.desired_kl is not None:
                if st["kl"] > 2.0 * config.desired_kl:
                    policy_opt.lr = max(1e-5, policy_opt.lr / 1.5)
                elif st["kl"] < 0.5 * config.desired_kl:
                    policy_opt.lr = min(1e-2, policy_opt.lr * 1.5)
    out = {k: v / max(updates, 1) for k, v in acc.items()}
    out.update(updates=updates, skipped=skipped, lr=policy_opt.lr,
               action_std=float(np.mean(np.exp(policy.log_std))))
    return out
