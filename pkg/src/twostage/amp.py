"""Motion-experience dataset, least-squares discriminator and style reward.

The discriminator sees a transition as the concatenation of two consecutive
normalized AMP states. It is trained to output +1 on dataset transitions
and -1 on policy transitions, with a gradient penalty on its input
gradient at dataset samples.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import amp_observation
from .nets import Adam, Mlp
from .rewards import style_reward

log = logging.getLogger(__name__)

DATASET_MAGIC = b"TSXP"
DATASET_VERSION = 1
STD_FLOOR = 1e-3

# forward, backward, side steps, turns; each held for 80 control steps
RECORD_SCRIPT = (
    ("forward", (0.5, 0.0, 0.0)),
    ("backward", (-0.5, 0.0, 0.0)),
    ("left", (0.0, 0.3, 0.0)),
    ("right", (0.0, -0.3, 0.0)),
    ("turn_left", (0.0, 0.0, 0.8)),
    ("turn_right", (0.0, 0.0, -0.8)),
)
SEGMENT_STEPS = 80


def amp_state_layout(num_joints: int) -> list[tuple[str, int]]:
    return [("joint_positions", num_joints), ("joint_velocities", num_joints),
            ("base_linear_velocity", 3), ("base_angular_velocity", 3)]


@dataclass
class ExperienceDataset:
    states: np.ndarray  # (count, width)
    rate: float = 50.0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states)
        if self.states.ndim != 2:
            raise ValueError("states must be a (count, width) array")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("dataset states must be finite")
        if self.mean is None:
            self.mean = self.states.mean(axis=0)
            self.std = np.maximum(self.states.std(axis=0), STD_FLOOR)

    @property
    def count(self) -> int:
        return self.states.shape[0]

    @property
    def width(self) -> int:
        return self.states.shape[1]

    @property
    def duration(self) -> float:
        return self.count / self.rate

    def transitions(self) -> np.ndarray:
        """Consecutive state pairs, shape (count - 1, 2 * width)."""
        return np.concatenate([self.states[:-1], self.states[1:]], axis=1)

    def normalize(self, x):
        mean = np.tile(self.mean, x.shape[-1] // self.width)
        std = np.tile(self.std, x.shape[-1] // self.width)
        return (x - mean) / std

    def denormalize(self, x):
        mean = np.tile(self.mean, x.shape[-1] // self.width)
        std = np.tile(self.std, x.shape[-1] // self.width)
        return x * std + mean


def save_dataset(dataset: ExperienceDataset, path) -> None:
    """Header (magic, version, width, count, rate), float32 states, float32 mean/std footer."""
    if dataset.count < 2:
        raise ValueError("a dataset needs at least two states")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<IIId", DATASET_VERSION, dataset.width, dataset.count,
                                             dataset.rate))
        fh.write(np.ascontiguousarray(dataset.states, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.std, dtype="<f4").tobytes())


def load_dataset(path) -> ExperienceDataset:
    data = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IIId")
    if len(data) < head or data[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not an experience dataset (bad magic)")
    version, width, count, rate = struct.unpack("<IIId", data[4:head])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    if width == 0 or count < 2:
        raise ValueError(f"{path}: header declares width {width}, count {count}")
    expected = head + 4 * (width * count + 2 * width)
    if len(data) != expected:
        raise ValueError(f"{path}: body is {len(data) - head} bytes, expected {expected - head} "
                         f"for {count} states of width {width}")
    body = np.frombuffer(data, dtype="<f4", offset=head)
    states = body[:width * count].reshape(count, width).astype(np.float32)
    mean = body[width * count:width * (count + 1)].astype(np.float32)
    std = body[width * (count + 1):].astype(np.float32)
    return ExperienceDataset(states, rate, mean, std)


class RecordingError(RuntimeError):
    def __init__(self, segment: str, step: int):
        self.segment = segment
        self.step = step
        super().__init__(f"robot fell during segment {segment!r} at step {step}")


def record_experience(env, policy, normalizer=None, script=RECORD_SCRIPT,
                      segment_steps: int = SEGMENT_STEPS, warmup_steps: int = 50) -> ExperienceDataset:
    """Roll out the policy mean over the command script and keep env 0's AMP states.

    Each segment holds its command for ``segment_steps``; the first state
    of the dataset is the one reached after ``warmup_steps`` under the
    first command. A termination aborts the recording.
    """
    norm = normalizer or (lambda o: o)
    env.reset_envs(np.arange(env.n))
    states = []
    plan = [(script[0][0], script[0][1], True)] * warmup_steps
    for name, cmd in script:
        plan += [(name, cmd, False)] * segment_steps
    for i, (name, cmd, warm) in enumerate(plan):
        env.commands[:] = cmd
        if not warm:
            states.append(amp_observation(env.state)[0].copy())
        mean = policy.mean(norm(env.observe())).astype(float)
        _, _, done, _ = env.step(mean)
        if done[0]:  # a fall, or a time-out cutting the recording short
            raise RecordingError(name, i)
    return ExperienceDataset(np.asarray(states), rate=1.0 / env.cfg.sim.control_dt)


# ----------------------------------------------------------------------------
# discriminator


@dataclass(frozen=True)
class DiscriminatorConfig:
    gp_coef: float = 10.0
    batch_size: int = 256
    updates_per_iteration: int = 2
    score_clip: float = 5.0
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.gp_coef < 0:
            raise ValueError("gradient penalty coefficient must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def lsgan_loss(d_real, d_fake):
    """``E[(D(real)-1)^2] + E[(D(fake)+1)^2]`` and its derivatives w.r.t. the scores."""
    d_real = np.asarray(d_real, dtype=float)
    d_fake = np.asarray(d_fake, dtype=float)
    if d_real.size == 0 or d_fake.size == 0:
        raise ValueError("empty discriminator batch")
    loss = np.mean((d_real - 1.0) ** 2) + np.mean((d_fake + 1.0) ** 2)
    return loss, 2.0 * (d_real - 1.0) / d_real.size, 2.0 * (d_fake + 1.0) / d_fake.size


def disc_loss(disc: Mlp, real, fake, gp_coef: float):
    """Least-squares loss L1, input-gradient penalty L2 and gradients of L1 + L2.

    ``real`` and ``fake`` are already-normalized transition batches.
    Returns ``(L1, L2, grads, stats)``.
    """
    real = np.asarray(real)
    fake = np.asarray(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty discriminator batch")
    l2, grads, d_real, gx = disc.input_grad_penalty(real, gp_coef)
    d_fake, cache_f = disc.forward(fake)
    l1, g_real, g_fake = lsgan_loss(d_real, d_fake)
    # penalty pass already holds the forward cache of the real batch
    _, cache_r = disc.forward(real)
    gr, _ = disc.backward(cache_r, g_real.astype(disc.dtype))
    gf, _ = disc.backward(cache_f, g_fake.astype(disc.dtype))
    grads = [a + b + c for a, b, c in zip(grads, gr, gf)]
    stats = {"d_real": float(np.mean(d_real)), "d_fake": float(np.mean(d_fake)),
             "grad_norm_sq": float(np.mean(np.sum(gx.astype(float) ** 2, axis=-1)))}
    return float(l1), float(l2), grads, stats


def scores(disc: Mlp, transitions_normalized, clip: float = 5.0):
    return np.clip(disc(transitions_normalized)[:, 0].astype(float), -clip, clip)


def make_style_fn(disc: Mlp, dataset: ExperienceDataset, config: DiscriminatorConfig = DiscriminatorConfig()):
    """Callable mapping AMP states before/after a step to the style reward."""
    def style_fn(before, after):
        x = dataset.normalize(np.concatenate([before, after], axis=-1))
        return style_reward(scores(disc, x, config.score_clip))
    return style_fn


def sample_real(dataset: ExperienceDataset, batch: int, rng: np.random.Generator):
    """Normalized dataset transitions; sampling is with replacement when the dataset is small."""
    trans = dataset.transitions()
    replace = trans.shape[0] < batch
    if replace:
        log.info("dataset has %d transitions < batch %d, sampling with replacement",
                 trans.shape[0], batch)
    idx = rng.choice(trans.shape[0], size=batch, replace=replace)
    return dataset.normalize(trans[idx]), replace


def train_discriminator_step(disc: Mlp, optimizer: Adam, dataset: ExperienceDataset, policy_transitions,
                             config: DiscriminatorConfig, rng: np.random.Generator) -> dict:
    """``updates_per_iteration`` Adam steps on fresh real/fake batches.

    ``policy_transitions`` are raw (unnormalized) concatenated state pairs.
    """
    fake_all = np.asarray(policy_transitions).reshape(-1, 2 * dataset.width)
    out = {"disc_l1": 0.0, "disc_l2": 0.0, "d_real": 0.0, "d_fake": 0.0, "with_replacement": False}
    for _ in range(config.updates_per_iteration):
        real, replaced = sample_real(dataset, config.batch_size, rng)
        fake = dataset.normalize(fake_all[rng.choice(fake_all.shape[0], size=config.batch_size,
                                                     replace=fake_all.shape[0] < config.batch_size)])
        l1, l2, grads, st = disc_loss(disc, real.astype(disc.dtype), fake.astype(disc.dtype), config.gp_coef)
        optimizer.step(grads)
        out["disc_l1"] += l1 / config.updates_per_iteration
        out["disc_l2"] += l2 / config.updates_per_iteration
        out["d_real"] += st["d_real"] / config.updates_per_iteration
        out["d_fake"] += st["d_fake"] / config.updates_per_iteration
        out["with_replacement"] |= replaced
    return out
