"""Vectorized velocity-tracking environment for both training stages."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import rewards as rw
from . import terrain as ter

log = logging.getLogger(__name__)

COMMAND_RANGES = ((-1.0, 1.0), (-0.5, 0.5), (-1.0, 1.0))
REWARD_MODES = ("BR", "BR+GR", "BR+ER")

# observation scaling keeps network inputs near unit range
ANG_VEL_SCALE = 0.25
JOINT_VEL_SCALE = 0.05
FOOT_FORCE_SCALE = 0.01


@dataclass(frozen=True)
class EnvConfig:
    stage: str = "I"  # "I" flat gait learning, "II" rough terrain
    reward_mode: str = "BR+GR"
    num_envs: int = 64
    max_episode_steps: int = 1000
    action_scale: float | tuple = 0.5  # scalar, or one value per joint of a leg
    action_clip: float = 3.0
    clock: bool = True  # gait clock in the observation
    randomize: bool = False
    curriculum: bool = False
    max_init_level: int = 0
    terrain_types: tuple = ter.TERRAIN_TYPES
    terrain_seed: int = 0
    push_interval_s: float = 8.0
    push_speed: float = 0.5
    tilt_limit: float = 1.0
    command_ranges: tuple = COMMAND_RANGES
    gait_period: float = 0.5
    duty_factor: float = 0.5
    sim: dyn.SimConfig = field(default_factory=dyn.SimConfig)

    def __post_init__(self):
        if self.stage not in ("I", "II"):
            raise ValueError(f"stage must be 'I' or 'II', got {self.stage!r}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward mode must be one of {REWARD_MODES}")
        if self.stage == "I" and self.reward_mode != "BR+GR":
            raise ValueError("stage I trains with gait rewards (reward mode BR+GR)")
        if self.num_envs < 1 or self.max_episode_steps < 1:
            raise ValueError("num_envs and max_episode_steps must be positive")
        if np.any(np.asarray(self.action_scale, dtype=float) <= 0):
            raise ValueError("action scale must be positive")

    @property
    def gait_terms(self) -> bool:
        return self.reward_mode == "BR+GR"


def amp_observation(state: dyn.RobotState):
    """Joint positions, joint velocities, body linear and angular velocity."""
    return np.concatenate([state.joint_positions, state.joint_velocities,
                           state.body_linear_velocity, state.body_angular_velocity], axis=-1)


class LocomotionEnv:
    """``num_envs`` robots stepped in lockstep with automatic resets.

    Observations are a dict of arrays: ``proprio`` (angular velocity,
    projected gravity, joint offsets, joint velocities, previous action),
    ``command``, ``clock``, ``scan`` (height scan) and ``priv`` (privileged
    state). ``step`` returns ``(obs, reward, done, info)``; ``info`` carries
    the reward breakdown, time-out flags and the AMP states before and after
    the step (the latter taken before any reset).
    """

    def __init__(self, model: dyn.RobotModel, config: EnvConfig, seed: int = 0):
        self.model = model
        self.cfg = config
        self.n = config.num_envs
        self.rng = np.random.default_rng(seed)
        self.reward_cfg = rw.RewardConfig.for_model(model, dt=config.sim.control_dt)
        self.schedule = rw.GaitSchedule.for_model(model, period=config.gait_period,
                                                  duty_factor=config.duty_factor)
        if config.stage == "II":
            self.grid = ter.build_grid(config.terrain_types, seed=config.terrain_seed)
            self.terrain = self.grid.map
        else:
            self.grid = None
            self.terrain = ter.flat(8.0)  # edge clamping extends it indefinitely
        if config.curriculum and self.grid is None:
            raise ValueError("the terrain curriculum needs stage II terrain")
        J = model.num_joints
        scale = np.asarray(config.action_scale, dtype=float)
        if scale.ndim and scale.size not in (1, model.joints_per_leg, J):
            raise ValueError(f"action scale needs 1, {model.joints_per_leg} or {J} values, got {scale.size}")
        self.action_scale = np.resize(scale, J) if scale.ndim else np.full(J, float(scale))
        self.curriculum = ter.CurriculumState.start(self.n, self.rng, len(config.terrain_types),
                                                    config.max_init_level)
        self.randomization = dyn.DynamicsRandomization.identity(self.n, J)
        self.commands = np.zeros((self.n, 3))
        self.actions = np.zeros((self.n, J))
        self.prev_actions = np.zeros((self.n, J))
        self.episode_step = np.zeros(self.n, dtype=int)
        self.episode_budget = np.full(self.n, config.max_episode_steps)
        self.episode_tracking = np.zeros(self.n)
        self.push_velocity = np.zeros((self.n, 3))
        self.nonfinite_resets = 0
        self.total_steps = 0
        self.state = dyn.initial_state(model, np.zeros((self.n, 3)), np.tile([1.0, 0, 0, 0], (self.n, 1)),
                                       np.tile(model.nominal_joint_positions, (self.n, 1)))
        self.reset_envs(np.arange(self.n))
        # stagger the first time-outs so resets do not synchronize
        self.episode_step[:] = self.rng.integers(0, config.max_episode_steps, size=self.n)
        self.episode_budget = config.max_episode_steps - self.episode_step

    # ------------------------------------------------------------------
    # resets

    def _spawn_xy(self, idx):
        if self.grid is None:
            return np.zeros((len(idx), 2))
        xy = self.grid.spawn_xy(self.curriculum.level[idx], self.curriculum.terrain_type[idx])
        return xy + self.rng.uniform(-0.3, 0.3, size=(len(idx), 2))

    def sample_commands(self, idx):
        k = len(idx)
        cmd = np.stack([self.rng.uniform(lo, hi, size=k) for lo, hi in self.cfg.command_ranges], axis=-1)
        constant = self.curriculum.yaw_mode[idx] == ter.YAW_CONSTANT
        cmd[constant, 2] = 0.0
        return cmd

    def reset_envs(self, idx):
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            return
        m = self.model
        k = idx.size
        if self.cfg.randomize:
            self.randomization.assign(idx, dyn.sample_randomization(self.rng, k, m.num_joints))
        lo, hi = m.joint_limits[:, 0], m.joint_limits[:, 1]
        q = np.clip(m.nominal_joint_positions * self.randomization.joint_position_scale[idx], lo, hi)
        yaw = self.rng.uniform(-np.pi, np.pi, size=k)
        quat = dyn.quat_from_euler(np.zeros(k), np.zeros(k), yaw)
        xy = self._spawn_xy(idx)
        feet, _, _ = dyn.leg_kinematics(m, q)
        ground, _ = ter.height_at(self.terrain, xy[:, 0], xy[:, 1])
        # lowest foot starts 2 cm above the ground under the base
        z = ground - feet[..., 2].min(axis=1) + 0.02
        pos = np.column_stack([xy, z])
        self.state.assign(idx, dyn.initial_state(m, pos, quat, q))
        self.commands[idx] = self.sample_commands(idx)
        self.actions[idx] = 0.0
        self.prev_actions[idx] = 0.0
        self.episode_step[idx] = 0
        self.episode_budget[idx] = self.cfg.max_episode_steps
        self.episode_tracking[idx] = 0.0
        self.push_velocity[idx] = 0.0

    def _update_curriculum(self, idx):
        if not self.cfg.curriculum or idx.size == 0:
            return
        frac = np.zeros(self.n)
        frac[idx] = np.clip(self.episode_tracking[idx] / self.episode_budget[idx], 0.0, 1.0)
        mask = np.zeros(self.n, bool)
        mask[idx] = True
        self.curriculum = ter.curriculum_update(self.curriculum, frac, self.rng, mask)

    # ------------------------------------------------------------------
    # observations

    @property
    def time(self):
        return self.episode_step * self.cfg.sim.control_dt

    def clock(self):
        phase = 2 * np.pi * self.time / self.schedule.period
        return np.stack([np.sin(phase), np.cos(phase)], axis=-1)

    def ground_height(self, xy):
        return ter.height_at(self.terrain, xy[..., 0], xy[..., 1])[0]

    def privileged(self):
        s, r = self.state, self.randomization
        base_h = s.base_position[:, 2] - self.ground_height(s.base_position[:, :2])
        return np.concatenate([
            s.body_linear_velocity,
            r.ground_friction[:, None],
            r.payload_mass[:, None],
            r.payload_offset,
            r.motor_strength_scale[:, None],
            r.kp_scale[:, None],
            r.kd_scale[:, None],
            r.link_mass_scale[:, None],
            self.push_velocity,
            FOOT_FORCE_SCALE * s.foot_contact_forces.reshape(self.n, -1),
            s.leg_collisions.astype(float),
            s.base_collision.astype(float)[:, None],
            base_h[:, None],
            r.joint_position_scale.mean(axis=1, keepdims=True),
        ], axis=-1)

    def observe(self) -> dict:
        s = self.state
        _, _, yaw = dyn.quat_to_euler(s.base_orientation)
        proprio = np.concatenate([
            ANG_VEL_SCALE * s.body_angular_velocity,
            dyn.projected_gravity(s.base_orientation),
            s.joint_positions - self.model.nominal_joint_positions,
            JOINT_VEL_SCALE * s.joint_velocities,
            self.actions,
        ], axis=-1)
        obs = {"proprio": proprio, "command": self.commands.copy()}
        if self.cfg.clock:
            obs["clock"] = self.clock()
        if self.cfg.stage == "II":
            scan = ter.height_scan(self.terrain, s.base_position, yaw)
            obs["scan"] = np.clip(scan - self.model.desired_body_height, -1.0, 1.0)
            obs["priv"] = self.privileged()
        return obs

    # ------------------------------------------------------------------
    # stepping

    def compute_terms(self, state, prev_actions, actions, commands, t) -> dict:
        """Raw reward terms of the active reward mode (style excluded)."""
        m, cfg = self.model, self.reward_cfg
        base_h = state.base_position[:, 2] - self.ground_height(state.base_position[:, :2])
        lin, ang = rw.task_rewards(state, commands, cfg)
        terms = {"lin_vel_tracking": lin, "ang_vel_tracking": ang}
        terms.update(rw.regularization_rewards(state, prev_actions, actions, m, cfg, base_height=base_h))
        if self.cfg.gait_terms:
            foot_h = state.foot_positions[..., 2] - self.ground_height(state.foot_positions[..., :2])
            terms.update(rw.gait_rewards(state, self.schedule, t, commands, m, cfg, foot_heights=foot_h))
        return terms

    def _push(self):
        every = int(round(self.cfg.push_interval_s / self.cfg.sim.control_dt))
        self.push_velocity *= 0.9
        if not self.cfg.randomize or every <= 0:
            return
        hit = (self.episode_step > 0) & (self.episode_step % every == 0)
        if hit.any():
            k = int(hit.sum())
            dv = np.zeros((k, 3))
            dv[:, :2] = self.rng.uniform(-self.cfg.push_speed, self.cfg.push_speed, size=(k, 2))
            self.state.base_linear_velocity[hit] += dv
            self.push_velocity[hit] = dv

    def step(self, actions, style_fn=None):
        """Apply raw policy actions; joint targets are nominal + action_scale * action.

        ``style_fn(amp_before, amp_after)`` returns the style reward per env
        when the reward mode uses it.
        """
        actions = np.clip(np.asarray(actions, dtype=float), -self.cfg.action_clip, self.cfg.action_clip)
        self.prev_actions = self.actions
        self.actions = actions
        amp_before = amp_observation(self.state)
        self._push()
        t_before = self.time
        new = dyn.step(self.model, self.state, self.action_scale * actions, self.terrain,
                       self.randomization, self.cfg.sim, strict=False)
        bad = ~np.all(np.isfinite(new.base_position), axis=1)
        for arr in (new.base_orientation, new.base_linear_velocity, new.base_angular_velocity,
                    new.joint_velocities):
            bad |= ~np.all(np.isfinite(arr.reshape(self.n, -1)), axis=1)
        if bad.any():
            self.nonfinite_resets += int(bad.sum())
            log.warning("non-finite simulation state in envs %s, resetting", np.flatnonzero(bad).tolist())
            new.assign(bad, self.state.subset(bad))
        self.state = new
        self.episode_step += 1
        self.total_steps += 1

        terms = self.compute_terms(new, self.prev_actions, actions, self.commands, t_before + self.cfg.sim.control_dt)
        amp_after = amp_observation(new)
        style = None
        if self.cfg.reward_mode == "BR+ER" and style_fn is not None:
            style = style_fn(amp_before, amp_after)
        breakdown = rw.total_reward(self.cfg.stage, terms, self.reward_cfg, style=style)
        self.episode_tracking += terms["lin_vel_tracking"]

        roll, pitch, _ = dyn.quat_to_euler(new.base_orientation)
        terminated = (new.base_collision | (np.abs(roll) > self.cfg.tilt_limit)
                      | (np.abs(pitch) > self.cfg.tilt_limit) | bad)
        timeout = (self.episode_step >= self.cfg.max_episode_steps) & ~terminated
        done = terminated | timeout
        info = {
            "breakdown": breakdown,
            "terms": terms,
            "timeout": timeout,
            "terminated": terminated,
            "amp_before": amp_before,
            "amp_after": amp_after,
            "contacts": new.foot_contacts,
            "desired_contact": self.schedule.desired_contact(t_before + self.cfg.sim.control_dt),
            "episode_tracking": self.episode_tracking / self.episode_budget,
        }
        idx = np.flatnonzero(done)
        if idx.size:
            info["terminal_obs"] = self.observe()
            self._update_curriculum(idx)
            self.reset_envs(idx)
        return self.observe(), breakdown.total, done, info
