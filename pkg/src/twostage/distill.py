"""Teacher-student distillation with an LSTM student trained by DAgger.

The student sees proprioception only. Its memory (LSTM) and head produce an
estimate of the teacher's latent ``[terrain latent; privileged latent]``,
which feeds a copy of the teacher's low-level network. Training minimizes
action imitation plus latent reconstruction on states visited by the
student itself, labelled by the teacher.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nets import Adam, Lstm, LstmSpec, Mlp, MlpSpec
from .policies import concat

log = logging.getLogger(__name__)


class Student:
    """LSTM memory over ``memory_keys``, latent head, low-level net over ``[latent; obs[low_keys]]``."""

    def __init__(self, memory: Lstm, head: Mlp, low_level: Mlp, memory_keys=("proprio",),
                 low_keys=("proprio", "command")):
        if head.spec.input_dim != memory.spec.output_dim:
            raise ValueError("head input must match the memory output width")
        self.memory = memory
        self.head = head
        self.low_level = low_level
        self.memory_keys = tuple(memory_keys)
        self.low_keys = tuple(low_keys)
        self.hidden = None

    @property
    def latent_dim(self) -> int:
        return self.head.spec.output_dim

    @property
    def params(self):
        return self.memory.params + self.head.params + self.low_level.params

    def reset_state(self, num_envs: int):
        self.hidden = self.memory.initial_state(num_envs)

    def forward_sequence(self, obs_seq: dict, h0=None, c0=None, resets=None):
        """Run (T, N, ·) observation sequences. Returns ``(actions, latents, (h, c), cache)``."""
        xs = concat(obs_seq, self.memory_keys)
        m, (h, c), mcache = self.memory.forward(xs, h0, c0, resets)
        T, N, _ = m.shape
        lat, hcache = self.head.forward(m.reshape(T * N, -1))
        low_in = np.concatenate([lat, concat(obs_seq, self.low_keys).reshape(T * N, -1).astype(lat.dtype)],
                                axis=-1)
        act, lcache = self.low_level.forward(low_in)
        return act.reshape(T, N, -1), lat.reshape(T, N, -1), (h, c), (mcache, hcache, lcache, T, N)

    def backward(self, cache, d_actions, d_latents):
        mcache, hcache, lcache, T, N = cache
        gl, gx = self.low_level.backward(lcache, d_actions.reshape(T * N, -1))
        d_lat = gx[:, :self.latent_dim] + d_latents.reshape(T * N, -1)
        gh, dm = self.head.backward(hcache, d_lat)
        gm, _, _ = self.memory.backward(mcache, dm.reshape(T, N, -1))
        return gm + gh + gl

    def act(self, obs: dict, resets=None):
        """One control step with the carried recurrent state; returns ``(action, latent)``."""
        n = next(iter(obs.values())).shape[0]
        if self.hidden is None or self.hidden[0][0].shape[0] != n:
            self.reset_state(n)
        seq = {k: v[None] for k, v in obs.items()}
        r = None if resets is None else np.asarray(resets, bool)[None]
        act, lat, (h, c), _ = self.forward_sequence(seq, self.hidden[0], self.hidden[1], r)
        self.hidden = (h, c)
        return act[0], lat[0]

    def mean(self, obs: dict):
        return self.act(obs)[0]


def init_student_from_teacher(teacher, memory_spec: LstmSpec, head_hidden=(256, 128),
                              rng: np.random.Generator | None = None, memory_keys=("proprio",),
                              dtype=None) -> Student:
    """Fresh memory and head, low-level network copied from ``teacher``."""
    rng = rng or np.random.default_rng(0)
    low = teacher.low_level
    dtype = dtype or low.dtype
    if low.spec.input_dim < teacher.latent_dim:
        raise ValueError("teacher low-level input is narrower than its latent")
    head_spec = MlpSpec(memory_spec.output_dim, tuple(head_hidden), teacher.latent_dim)
    memory = Lstm(memory_spec, rng, dtype=dtype)
    head = Mlp(head_spec, rng, dtype=dtype)
    low_copy = Mlp(low.spec, dtype=dtype, params=[p.copy() for p in low.params])
    return Student(memory, head, low_copy, memory_keys, teacher.keys)


@dataclass
class DistillBatch:
    obs: dict  # key -> (T, N, d)
    teacher_actions: np.ndarray  # (T, N, A)
    teacher_latents: np.ndarray  # (T, N, latent)
    resets: np.ndarray  # (T, N) reset state before step t
    h0: list
    c0: list
    dropped: int = 0


def dagger_collect(student: Student, teacher, env, steps: int, normalizer=None) -> DistillBatch:
    """Roll the student out for ``steps`` and label every visited state with the teacher.

    The student's recurrent state carries over between calls and is reset
    at episode boundaries; the batch records the state it started from.
    """
    norm = normalizer or (lambda o: o)
    n = env.n
    if student.hidden is None or student.hidden[0][0].shape[0] != n:
        student.reset_state(n)
        student.pending_reset = np.zeros(n, bool)
    pending = getattr(student, "pending_reset", np.zeros(n, bool))
    h0 = [a.copy() for a in student.hidden[0]]
    c0 = [a.copy() for a in student.hidden[1]]
    obs_seq, t_act, t_lat, resets = [], [], [], []
    dropped = 0
    for _ in range(steps):
        obs = norm(env.observe())
        try:
            lat, _ = teacher.latent(obs)
            a_t = teacher.forward(obs)[0]
        except (ValueError, FloatingPointError) as exc:
            dropped += 1
            log.warning("teacher query failed (%s); step dropped", exc)
            a_s, _ = student.act(obs, pending)
            _, _, done, _ = env.step(np.asarray(a_s, dtype=float))
            pending = done.copy()
            continue
        obs_seq.append(obs)
        t_act.append(a_t)
        t_lat.append(lat)
        resets.append(pending.copy())
        a_s, _ = student.act(obs, pending)
        _, _, done, _ = env.step(np.asarray(a_s, dtype=float))
        pending = done.copy()
    student.pending_reset = pending
    keys = obs_seq[0].keys()
    return DistillBatch({k: np.stack([o[k] for o in obs_seq]) for k in keys}, np.stack(t_act),
                        np.stack(t_lat), np.stack(resets), h0, c0, dropped)


def distill_loss(student: Student, batch: DistillBatch, beta: float = 1.0):
    """Imitation and reconstruction MSE with gradients of ``imitation + beta * reconstruction``."""
    act, lat, _, cache = student.forward_sequence(batch.obs, batch.h0, batch.c0, batch.resets)
    ea = act.astype(np.float64) - batch.teacher_actions
    el = lat.astype(np.float64) - batch.teacher_latents
    imitation = float(np.mean(ea * ea))
    reconstruction = float(np.mean(el * el))
    d_act = (2.0 * ea / ea.size).astype(act.dtype)
    d_lat = (2.0 * beta * el / el.size).astype(lat.dtype)
    grads = student.backward(cache, d_act, d_lat)
    return imitation, reconstruction, grads


def distill_update(student: Student, batch: DistillBatch, optimizer: Adam, beta: float = 1.0,
                   window: int = 50) -> dict:
    """Truncated-BPTT Adam steps over consecutive windows of the batch."""
    T = batch.teacher_actions.shape[0]
    h, c = batch.h0, batch.c0
    out = {"imitation": 0.0, "reconstruction": 0.0, "windows": 0, "skipped": 0}
    for start in range(0, T, window):
        sl = slice(start, min(T, start + window))
        sub = DistillBatch({k: v[sl] for k, v in batch.obs.items()}, batch.teacher_actions[sl],
                           batch.teacher_latents[sl], batch.resets[sl], h, c)
        imit, rec, grads = distill_loss(student, sub, beta)
        # carry the (detached) recurrent state into the next window
        _, (h, c), _ = student.memory.forward(concat(sub.obs, student.memory_keys), h, c, sub.resets)
        if not (np.isfinite(imit) and np.isfinite(rec)):
            out["skipped"] += 1
            continue
        optimizer.step(grads)
        out["imitation"] += imit
        out["reconstruction"] += rec
        out["windows"] += 1
    k = max(out["windows"], 1)
    out["imitation"] /= k
    out["reconstruction"] /= k
    return out


# ----------------------------------------------------------------------------
# identifiable synthetic system


class LinearLatentTeacher:
    """Teacher whose latent is a fixed linear map of the current and two previous observations."""

    def __init__(self, mixing: np.ndarray, low_level: Mlp, keys=("proprio",)):
        self.mixing = mixing
        self.low_level = low_level
        self.keys = tuple(keys)
        self.latent_dim = mixing.shape[0]

    def latent(self, obs):
        hist = np.concatenate([obs["proprio"], obs["priv"]], axis=-1)
        return hist @ self.mixing.T, None

    def forward(self, obs):
        lat, _ = self.latent(obs)
        x = np.concatenate([lat, concat(obs, self.keys)], axis=-1)
        return self.low_level.forward(x.astype(self.low_level.dtype))[0], None


class SyntheticSystem:
    """Linear stochastic plant whose hidden latent is identifiable from three observations.

    ``o_{t+1} = decay * o_t + gain * B a_t + noise``; ``priv`` exposes
    ``[o_{t-1}; o_{t-2}]`` to the teacher only. Episodes last
    ``episode_steps`` and restart from a fresh random observation with
    zero history.
    """

    def __init__(self, num_envs: int = 16, obs_dim: int = 4, action_dim: int = 2, latent_dim: int = 3,
                 episode_steps: int = 40, seed: int = 0, decay: float = 0.6, gain: float = 0.3,
                 noise: float = 0.3):
        self.rng = np.random.default_rng(seed)
        self.n = num_envs
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.episode_steps = episode_steps
        self.decay, self.gain, self.noise = decay, gain, noise
        self.B = self.rng.standard_normal((obs_dim, action_dim)) / np.sqrt(action_dim)
        self.mixing = self.rng.standard_normal((latent_dim, 3 * obs_dim)) * (0.5 / np.sqrt(3 * obs_dim))
        self.obs = np.zeros((num_envs, obs_dim))
        self.hist = np.zeros((num_envs, 2 * obs_dim))
        self.t = np.zeros(num_envs, dtype=int)
        self._reset(np.arange(num_envs))

    def _reset(self, idx):
        self.obs[idx] = self.noise * self.rng.standard_normal((len(idx), self.obs_dim))
        self.hist[idx] = 0.0
        self.t[idx] = 0

    def observe(self) -> dict:
        return {"proprio": self.obs.copy(), "priv": self.hist.copy()}

    def step(self, actions, style_fn=None):
        a = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        d = self.obs_dim
        self.hist = np.concatenate([self.obs, self.hist[:, :d]], axis=1)
        self.obs = (self.decay * self.obs + self.gain * a @ self.B.T
                    + self.noise * self.rng.standard_normal(self.obs.shape))
        self.t += 1
        done = self.t >= self.episode_steps
        if done.any():
            self._reset(np.flatnonzero(done))
        return self.observe(), np.zeros(self.n), done, {}


def synthetic_teacher(system: SyntheticSystem, rng: np.random.Generator, hidden=(32, 32),
                      dtype=np.float64) -> LinearLatentTeacher:
    spec = MlpSpec(system.mixing.shape[0] + system.obs_dim, tuple(hidden), system.action_dim,
                   output_activation="tanh")
    return LinearLatentTeacher(system.mixing, Mlp(spec, rng, dtype=dtype))
