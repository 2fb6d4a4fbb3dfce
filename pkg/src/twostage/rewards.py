"""Reward terms for velocity tracking, regularization, gait shaping and style.

Every term is computed raw (unscaled) and signed: bonuses are positive,
penalties negative. Scales are all positive and multiplied by the control
period when the total is assembled. All functions are vectorized over a
leading environment axis and have no side effects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotModel, RobotState, quat_to_euler

TASK_TERMS = ("lin_vel_tracking", "ang_vel_tracking")
STABILITY_TERMS = ("lin_vel_z", "ang_vel_xy", "base_height")
SMOOTHNESS_TERMS = ("joint_torque", "joint_acc", "action_rate")
SAFETY_TERMS = ("collision", "torque_limit", "joint_vel_limit", "contact_force_limit")
REGULARIZATION_TERMS = STABILITY_TERMS + SMOOTHNESS_TERMS + SAFETY_TERMS
GAIT_TERMS = ("swing_force", "stance_velocity", "raibert", "footswing_height")
STYLE_TERM = "style"
ALL_TERMS = TASK_TERMS + REGULARIZATION_TERMS + GAIT_TERMS + (STYLE_TERM,)

# scale column, before multiplication by dt
TABLE_SCALES = {
    "lin_vel_tracking": 1.0,
    "ang_vel_tracking": 0.8,
    "lin_vel_z": 2.0,
    "ang_vel_xy": 0.05,
    "base_height": 0.2,
    "joint_torque": 1e-5,
    "joint_acc": 2.5e-7,
    "action_rate": 0.01,
    "collision": 0.1,
    "torque_limit": 0.01,
    "joint_vel_limit": 0.1,
    "contact_force_limit": 0.02,
    "swing_force": 4.0,
    "stance_velocity": 4.0,
    "raibert": 10.0,
    "footswing_height": 2.0,
    "style": 1.0,
}


@dataclass(frozen=True)
class RewardConfig:
    scales: dict = field(default_factory=lambda: dict(TABLE_SCALES))
    dt: float = 0.02
    tracking_sigma: float = 0.15
    sigma_cf: float = 100.0  # N^2
    sigma_cv: float = 0.25  # (m/s)^2
    desired_body_height: float = 0.25
    swing_apex_height: float = 0.09
    stance_width: float = 0.15

    def __post_init__(self):
        unknown = set(self.scales) - set(ALL_TERMS)
        if unknown:
            raise ValueError(f"unknown reward terms {sorted(unknown)}")
        for name in ("tracking_sigma", "sigma_cf", "sigma_cv"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_model(cls, model: RobotModel, **kw) -> "RewardConfig":
        return cls(desired_body_height=model.desired_body_height, **kw)

    def scale(self, term: str) -> float:
        """Multiplier applied to the raw term (table scale times dt)."""
        return self.scales.get(term, 0.0) * self.dt

    def matches_table(self) -> bool:
        return all(self.scales.get(k) == v for k, v in TABLE_SCALES.items()) and self.dt == 0.02


# ----------------------------------------------------------------------------
# gait schedule


@dataclass(frozen=True)
class GaitSchedule:
    """Periodic per-foot stance/swing plan; stance while the phase is below ``duty_factor``."""

    offsets: np.ndarray
    period: float = 0.5
    duty_factor: float = 0.5
    band: float = 0.05  # width of the smooth stance/swing transition, in phase units

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        if not 0.0 < self.duty_factor < 1.0:
            raise ValueError("duty factor must lie in (0, 1)")
        if not 0.0 < self.band < min(self.duty_factor, 1 - self.duty_factor):
            raise ValueError("transition band must be narrower than stance and swing")

    @classmethod
    def for_model(cls, model: RobotModel, **kw) -> "GaitSchedule":
        return cls(np.asarray(model.gait_offsets, dtype=float), **kw)

    @property
    def stance_time(self) -> float:
        return self.duty_factor * self.period

    def phase(self, t):
        """Per-foot phase in [0, 1); ``t`` broadcasts against the foot axis."""
        t = np.asarray(t, dtype=float)
        return np.mod(t[..., None] / self.period + self.offsets, 1.0)

    def desired_contact(self, t):
        """Commanded contact C in [0, 1] for every foot, shape ``t.shape + (L,)``."""
        return _smooth_contact(self.phase(t), self.duty_factor, self.band)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _smooth_contact(u, duty, w):
    # rises around u=0 (touchdown), falls around u=duty (liftoff); the last
    # term continues the rise that straddles the wrap at u=1
    h = 0.5 * w
    return (_smoothstep((u + h) / w) * _smoothstep((duty - u + h) / w)
            + _smoothstep((u - 1.0 + h) / w))


def contact_schedule(schedule: GaitSchedule, foot_index: int, t):
    """Commanded contact of one foot: 1 stance, 0 swing, smooth in between."""
    u = np.mod(np.asarray(t, dtype=float) / schedule.period + schedule.offsets[foot_index], 1.0)
    return _smooth_contact(u, schedule.duty_factor, schedule.band)


def gait_adherence(contacts, desired):
    """Fraction of feet whose measured contact matches the commanded one (C > 0.5)."""
    contacts = np.asarray(contacts, bool)
    return np.mean(contacts == (np.asarray(desired) > 0.5), axis=-1)


# ----------------------------------------------------------------------------
# terms


def _yaw_frame(state: RobotState, vec_world):
    """Rotate world xy vectors by minus the base yaw. ``vec_world`` is (N, ..., 3)."""
    _, _, yaw = quat_to_euler(state.base_orientation)
    c, s = np.cos(yaw), np.sin(yaw)
    shape = (-1,) + (1,) * (vec_world.ndim - 2)
    c, s = c.reshape(shape), s.reshape(shape)
    x, y = vec_world[..., 0], vec_world[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def task_rewards(state: RobotState, command, config: RewardConfig = RewardConfig()):
    """Exponential tracking of commanded body-frame (v_x, v_y) and yaw rate."""
    command = np.asarray(command, dtype=float)
    v = state.body_linear_velocity
    w = state.body_angular_velocity
    lin_err = np.sum((command[..., :2] - v[..., :2]) ** 2, axis=-1)
    ang_err = (command[..., 2] - w[..., 2]) ** 2
    return np.exp(-lin_err / config.tracking_sigma), np.exp(-ang_err / config.tracking_sigma)


def regularization_rewards(state: RobotState, prev_action, action, model: RobotModel,
                           config: RewardConfig = RewardConfig(), base_height=None) -> dict:
    """Stability, smoothness and safety penalties (all <= 0).

    ``base_height`` is the base height above the ground; defaults to the
    world z of the base, which is right on flat ground at zero.
    """
    v = state.body_linear_velocity
    w = state.body_angular_velocity
    h = state.base_position[:, 2] if base_height is None else np.asarray(base_height)
    da = np.asarray(action) - np.asarray(prev_action)
    f_norm = np.linalg.norm(state.foot_contact_forces, axis=-1)

    def hinge(x, limit):
        return np.linalg.norm(np.maximum(np.abs(x) - limit, 0.0), axis=-1)

    return {
        "lin_vel_z": -v[:, 2] ** 2,
        "ang_vel_xy": -np.linalg.norm(w[:, :2], axis=-1),
        "base_height": -np.abs(h - config.desired_body_height),
        "joint_torque": -np.sum(state.joint_torques ** 2, axis=-1),
        "joint_acc": -np.sum(state.joint_accelerations ** 2, axis=-1),
        "action_rate": -np.sum(da ** 2, axis=-1),
        "collision": -state.collision_count.astype(float),
        "torque_limit": -hinge(state.joint_torques, model.torque_limit),
        "joint_vel_limit": -hinge(state.joint_velocities, model.joint_velocity_limit),
        "contact_force_limit": -hinge(f_norm, model.foot_force_limit),
    }


def nominal_foot_xy(model: RobotModel, stance_width: float):
    """Neutral footholds: each hip pushed out along its mounting direction."""
    a = model.hip_mount_angles
    return model.hip_offsets[:, :2] + stance_width * np.stack([np.cos(a), np.sin(a)], axis=-1)


def raibert_targets(model: RobotModel, schedule: GaitSchedule, t, command,
                    config: RewardConfig = RewardConfig()):
    """Desired foot xy in the yaw-aligned base frame, shape (N, L, 2).

    The target leads the neutral foothold by half the stance travel at
    touchdown and sweeps back linearly through stance; during swing it
    moves forward again so the foot arrives where it should land.
    """
    command = np.asarray(command, dtype=float)
    nominal = nominal_foot_xy(model, config.stance_width)
    u = schedule.phase(t)
    d = schedule.duty_factor
    factor = np.where(u < d, 0.5 - u / d, -0.5 + (u - d) / (1.0 - d))
    # body velocity at each neutral foothold from the commanded twist
    wz = command[:, 2:3]
    vx = command[:, 0:1] - wz * nominal[:, 1]
    vy = command[:, 1:2] + wz * nominal[:, 0]
    travel = factor * schedule.stance_time
    return nominal + np.stack([travel * vx, travel * vy], axis=-1)


def gait_rewards(state: RobotState, schedule: GaitSchedule, t, command, model: RobotModel,
                 config: RewardConfig = RewardConfig(), foot_heights=None) -> dict:
    """Swing-force and stance-velocity bonuses, Raibert and swing-height penalties.

    ``foot_heights`` is each foot's height above the ground below it;
    defaults to its world z.
    """
    C = schedule.desired_contact(t)
    f2 = np.sum(state.foot_contact_forces ** 2, axis=-1)
    v2 = np.sum(state.foot_velocities[..., :2] ** 2, axis=-1)
    rel = _yaw_frame(state, state.foot_positions - state.base_position[:, None, :])
    target = raibert_targets(model, schedule, t, command, config)
    hz = state.foot_positions[..., 2] if foot_heights is None else np.asarray(foot_heights)
    return {
        "swing_force": np.sum((1.0 - C) * np.exp(-f2 / config.sigma_cf), axis=-1),
        "stance_velocity": np.sum(C * np.exp(-v2 / config.sigma_cv), axis=-1),
        "raibert": -np.sum((rel - target) ** 2, axis=(-2, -1)),
        "footswing_height": -np.sum((1.0 - C) * (hz - config.swing_apex_height) ** 2, axis=-1),
    }


def style_reward(score):
    """Discriminator score mapped to [0, 1]; peaks at 1 for a score of 1."""
    score = np.asarray(score, dtype=float)
    return np.maximum(0.0, 1.0 - 0.25 * (score - 1.0) ** 2)


# ----------------------------------------------------------------------------
# assembly


@dataclass
class RewardBreakdown:
    raw: dict
    scaled: dict
    task: np.ndarray
    regularization: np.ndarray
    gait: np.ndarray
    style: np.ndarray
    total: np.ndarray

    def columns(self) -> dict:
        """Flat name -> array mapping for logging (scaled terms and subtotals)."""
        out = {f"raw/{k}": v for k, v in self.raw.items()}
        out.update({f"rew/{k}": v for k, v in self.scaled.items()})
        out.update(task=self.task, regularization=self.regularization, gait=self.gait,
                   style=self.style, total=self.total)
        return out


def total_reward(stage: str, terms: dict, config: RewardConfig = RewardConfig(),
                 style=None) -> RewardBreakdown:
    """Scale and sum raw terms.

    Stage ``"I"`` sums task, regularization and gait terms and rejects a
    style reward. Stage ``"II"`` sums task, style and regularization terms;
    gait terms are added only when present (gait-reward ablation arm).
    """
    if stage not in ("I", "II"):
        raise ValueError(f"stage must be 'I' or 'II', got {stage!r}")
    if stage == "I" and style is not None:
        raise ValueError("style reward is only defined for stage II")
    raw = dict(terms)
    if style is not None:
        raw[STYLE_TERM] = np.asarray(style, dtype=float)
    missing = [k for k in TASK_TERMS + REGULARIZATION_TERMS if k not in raw]
    if stage == "I":
        missing += [k for k in GAIT_TERMS if k not in raw]
    if missing:
        raise ValueError(f"missing reward terms {missing}")
    scaled = {k: config.scale(k) * np.asarray(v, dtype=float) for k, v in raw.items()}
    zero = np.zeros_like(scaled["lin_vel_tracking"])

    def subtotal(names):
        return sum((scaled[k] for k in names if k in scaled), zero)

    task = subtotal(TASK_TERMS)
    reg = subtotal(REGULARIZATION_TERMS)
    gait = subtotal(GAIT_TERMS)
    sty = scaled.get(STYLE_TERM, zero)
    return RewardBreakdown(raw, scaled, task, reg, gait, sty, task + reg + gait + sty)
