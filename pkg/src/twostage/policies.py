"""Actors, critics and observation normalization built on :mod:`twostage.nets`.

An actor maps an observation dict to an action mean and can backpropagate
a gradient on that mean into its parameter list. The Gaussian policy adds a
learned state-independent log standard deviation on top.
"""
from __future__ import annotations

import numpy as np

from .nets import Mlp, MlpSpec

LOG_2PI = np.log(2.0 * np.pi)


class ObsNormalizer:
    """Running mean/variance per observation key (parallel Welford merge)."""

    def __init__(self, dims: dict, clip: float = 5.0, eps: float = 1e-8):
        self.mean = {k: np.zeros(d) for k, d in dims.items()}
        self.var = {k: np.ones(d) for k, d in dims.items()}
        self.count = 0.0
        self.clip = clip
        self.eps = eps
        self.frozen = False

    def update(self, obs: dict) -> None:
        if self.frozen:
            return
        n = next(iter(obs.values())).shape[0]
        total = self.count + n
        for k in self.mean:
            x = obs[k]
            bm, bv = x.mean(0), x.var(0)
            delta = bm - self.mean[k]
            self.mean[k] = self.mean[k] + delta * n / total
            m2 = self.var[k] * self.count + bv * n + delta ** 2 * self.count * n / total
            self.var[k] = m2 / total
        self.count = total

    def __call__(self, obs: dict) -> dict:
        out = {}
        for k, x in obs.items():
            if k in self.mean:
                x = np.clip((x - self.mean[k]) / np.sqrt(self.var[k] + self.eps), -self.clip, self.clip)
            out[k] = x
        return out

    def state_arrays(self, prefix: str = "norm") -> dict:
        arrays = {f"{prefix}/count": np.array([self.count])}
        for k in self.mean:
            arrays[f"{prefix}/mean/{k}"] = self.mean[k]
            arrays[f"{prefix}/var/{k}"] = self.var[k]
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "norm") -> "ObsNormalizer":
        keys = [name.split("/", 2)[2] for name in arrays if name.startswith(f"{prefix}/mean/")]
        norm = cls({k: arrays[f"{prefix}/mean/{k}"].shape[0] for k in keys})
        for k in keys:
            norm.mean[k] = np.asarray(arrays[f"{prefix}/mean/{k}"], dtype=float)
            norm.var[k] = np.asarray(arrays[f"{prefix}/var/{k}"], dtype=float)
        norm.count = float(arrays[f"{prefix}/count"][0])
        return norm


def concat(obs: dict, keys) -> np.ndarray:
    return np.concatenate([obs[k] for k in keys], axis=-1)


class MlpActor:
    """One MLP over the concatenation of ``keys``."""

    def __init__(self, net: Mlp, keys):
        self.net = net
        self.keys = tuple(keys)

    @property
    def params(self):
        return self.net.params

    def forward(self, obs):
        return self.net.forward(concat(obs, self.keys))

    def backward(self, cache, d_out):
        grads, _ = self.net.backward(cache, d_out)
        return grads


class TeacherActor:
    """Terrain and privileged encoders feeding a low-level MLP.

    Low-level input is ``[terrain latent; privileged latent; obs[keys]...]``.
    """

    def __init__(self, terrain_encoder: Mlp, priv_encoder: Mlp, low_level: Mlp,
                 keys=("proprio", "command")):
        self.terrain_encoder = terrain_encoder
        self.priv_encoder = priv_encoder
        self.low_level = low_level
        self.keys = tuple(keys)
        self.latent_dim = terrain_encoder.spec.output_dim + priv_encoder.spec.output_dim

    @property
    def params(self):
        return self.terrain_encoder.params + self.priv_encoder.params + self.low_level.params

    def latent(self, obs):
        le, ce = self.terrain_encoder.forward(obs["scan"])
        lp, cp = self.priv_encoder.forward(obs["priv"])
        return np.concatenate([le, lp], axis=-1), (ce, cp)

    def forward(self, obs):
        lat, (ce, cp) = self.latent(obs)
        x = np.concatenate([lat, concat(obs, self.keys).astype(lat.dtype)], axis=-1)
        mean, cl = self.low_level.forward(x)
        return mean, (ce, cp, cl)

    def backward(self, cache, d_out):
        ce, cp, cl = cache
        gl, gx = self.low_level.backward(cl, d_out)
        ne = self.terrain_encoder.spec.output_dim
        ge, _ = self.terrain_encoder.backward(ce, gx[:, :ne])
        gp, _ = self.priv_encoder.backward(cp, gx[:, ne:self.latent_dim])
        return ge + gp + gl


class GaussianPolicy:
    """Diagonal Gaussian around the actor mean with a learned global log-std."""

    def __init__(self, actor, action_dim: int, init_log_std: float = -0.5, dtype=np.float32):
        self.actor = actor
        self.log_std = np.full(action_dim, init_log_std, dtype=dtype)

    @property
    def params(self):
        return self.actor.params + [self.log_std]

    def mean(self, obs):
        return self.actor.forward(obs)[0]

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        """Returns ``(action, log_prob, mean)``."""
        mu = self.actor.forward(obs)[0].astype(np.float64)
        if deterministic:
            return mu, self.log_prob(mu, mu), mu
        a = mu + np.exp(self.log_std.astype(np.float64)) * rng.standard_normal(mu.shape)
        return a, self.log_prob(mu, a), mu

    def log_prob(self, mu, action):
        ls = self.log_std.astype(np.float64)
        z = (action - mu) * np.exp(-ls)
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(ls) - 0.5 * mu.shape[-1] * LOG_2PI

    def entropy(self) -> float:
        return float(np.sum(self.log_std.astype(np.float64) + 0.5 * (LOG_2PI + 1.0)))


class Critic:
    """State-value MLP over the concatenation of ``keys``."""

    def __init__(self, net: Mlp, keys):
        if net.spec.output_dim != 1:
            raise ValueError("critic must have a scalar output")
        self.net = net
        self.keys = tuple(keys)

    @property
    def params(self):
        return self.net.params

    def forward(self, obs):
        v, cache = self.net.forward(concat(obs, self.keys))
        return v[:, 0], cache

    def __call__(self, obs):
        return self.forward(obs)[0]

    def backward(self, cache, d_value):
        grads, _ = self.net.backward(cache, np.asarray(d_value)[:, None])
        return grads


def mlp_actor(spec: MlpSpec, keys, rng, dtype=np.float32) -> MlpActor:
    return MlpActor(Mlp(spec, rng, dtype=dtype, output_gain=0.01), keys)


def teacher_actor(specs: dict, keys, rng, dtype=np.float32) -> TeacherActor:
    return TeacherActor(Mlp(specs["terrain_encoder"], rng, dtype=dtype),
                        Mlp(specs["priv_encoder"], rng, dtype=dtype),
                        Mlp(specs["low_level"], rng, dtype=dtype, output_gain=0.01), keys)
