"""Small stand-in environments for exercising the learning code quickly."""
from types import SimpleNamespace

import numpy as np


class _Breakdown:
    def __init__(self, total):
        self.total = total
        self.raw = {"lin_vel_tracking": total}


class PointMassEnv:
    """1-D point mass that should track a commanded velocity.

    Observation ``proprio`` = [velocity], ``command`` = [target]. The action
    is an acceleration. Reward exp(-(v - target)^2 / 0.15); episodes run for
    ``horizon`` steps and then time out.
    """

    def __init__(self, n: int = 16, horizon: int = 40, seed: int = 0):
        self.n = n
        self.horizon = horizon
        self.rng = np.random.default_rng(seed)
        self.model = SimpleNamespace(action_dim=1, amp_dim=2)
        self.v = np.zeros(n)
        self.target = self.rng.uniform(-1, 1, n)
        self.t = np.zeros(n, int)

    def observe(self):
        return {"proprio": self.v[:, None].copy(), "command": self.target[:, None].copy()}

    def step(self, action, style_fn=None):
        a = np.clip(np.asarray(action)[:, 0], -3, 3)
        before = np.stack([self.v, self.target], 1)
        self.v = self.v + 0.1 * a
        r = np.exp(-(self.v - self.target) ** 2 / 0.15)
        self.t += 1
        timeout = self.t >= self.horizon
        after = np.stack([self.v, self.target], 1)
        info = {"timeout": timeout, "amp_before": before, "amp_after": after,
                "breakdown": _Breakdown(r), "contacts": np.ones((self.n, 1), bool),
                "desired_contact": np.ones((self.n, 1)), "episode_tracking": r}
        if timeout.any():
            info["terminal_obs"] = self.observe()
            k = timeout.sum()
            self.v[timeout] = 0.0
            self.target[timeout] = self.rng.uniform(-1, 1, k)
            self.t[timeout] = 0
        return self.observe(), r, timeout, info
