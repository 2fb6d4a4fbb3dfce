"""Simplified floating-base dynamics for multi-legged robots.

The base is a single rigid body. Legs are massless kinematic chains whose
joints follow PD torque plus the foot's ground reaction (J^T f) through a
fixed reflected inertia; feet touch the
ground through a penalty spring-damper with a Coulomb cap on the tangential
force. Everything is vectorized over a leading environment axis.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .terrain import TerrainMap, height_at

log = logging.getLogger(__name__)

GRAVITY_DIR = np.array([0.0, 0.0, -1.0])


class NonFiniteStateError(FloatingPointError):
    """Raised by :func:`step` when integration produced NaN or inf."""

    def __init__(self, field_name: str, env_ids: np.ndarray, state: "RobotState"):
        self.field_name = field_name
        self.env_ids = np.asarray(env_ids)
        self.state = state
        super().__init__(f"non-finite values in {field_name!r} for envs {self.env_ids.tolist()}")


# ----------------------------------------------------------------------------
# quaternions, (w, x, y, z) convention


def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def cross(a, b):
    """``np.cross`` for (..., 3) arrays without the axis bookkeeping overhead."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def quat_conjugate(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate vectors ``v`` (body frame) into the world frame."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * cross(u, v)
    return v + w * t + cross(u, t)


def quat_rotate_inverse(q, v):
    """Rotate world-frame vectors into the body frame."""
    w = q[..., :1]
    u = -q[..., 1:]
    t = 2.0 * cross(u, v)
    return v + w * t + cross(u, t)


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_from_euler(roll, pitch, yaw):
    """Intrinsic z-y-x (yaw, then pitch, then roll) Euler angles to quaternion."""
    cr, sr = np.cos(0.5 * np.asarray(roll)), np.sin(0.5 * np.asarray(roll))
    cp, sp = np.cos(0.5 * np.asarray(pitch)), np.sin(0.5 * np.asarray(pitch))
    cy, sy = np.cos(0.5 * np.asarray(yaw)), np.sin(0.5 * np.asarray(yaw))
    return np.stack(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ],
        axis=-1,
    )


def quat_to_euler(q):
    """Return (roll, pitch, yaw) for z-y-x Euler angles."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return roll, pitch, yaw


def _quat_exp_step(omega_world, dt):
    """Quaternion of the rotation ``omega_world * dt`` (world frame)."""
    theta = np.linalg.norm(omega_world, axis=-1, keepdims=True) * dt
    half = 0.5 * theta
    # sin(x/2)/x -> 1/2 as x -> 0
    small = theta < 1e-12
    k = np.where(small, 0.5 * dt, np.sin(half) / np.where(small, 1.0, theta) * dt)
    return np.concatenate([np.cos(half), k * omega_world], axis=-1)


def projected_gravity(base_orientation):
    """World gravity direction (0, 0, -1) expressed in the body frame."""
    q = np.asarray(base_orientation, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > 1e-9):
        log.warning("projected_gravity: non-unit quaternion normalized (max |norm-1|=%.3g)",
                    float(np.max(np.abs(norm - 1.0))))
        q = q / norm
    return quat_rotate_inverse(q, np.broadcast_to(GRAVITY_DIR, q.shape[:-1] + (3,)))


# ----------------------------------------------------------------------------
# robot model


@dataclass
class RobotModel:
    name: str
    leg_count: int
    joints_per_leg: int
    hip_offsets: np.ndarray  # (L, 3) base frame
    hip_mount_angles: np.ndarray  # (L,) yaw of each leg's zero direction
    link_lengths: np.ndarray  # (3,) coxa, femur, tibia
    base_mass: float
    base_inertia: np.ndarray  # (3, 3)
    base_half_extents: np.ndarray  # (3,)
    nominal_joint_positions: np.ndarray  # (J,)
    joint_limits: np.ndarray  # (J, 2)
    torque_limit: float
    joint_velocity_limit: float
    foot_force_limit: float
    reflected_inertia: float = 0.05
    gait_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    desired_body_height: float = 0.25

    def __post_init__(self):
        if self.joints_per_leg != 3:
            raise ValueError("only 3-joint legs are supported")
        if np.any(np.asarray(self.link_lengths) <= 0):
            raise ValueError("link lengths must be positive")
        if self.base_mass <= 0:
            raise ValueError("base mass must be positive")
        if np.any(np.linalg.eigvalsh(self.base_inertia) <= 0):
            raise ValueError("base inertia must be positive definite")
        if self.nominal_joint_positions.shape != (self.num_joints,):
            raise ValueError(f"expected {self.num_joints} nominal joint positions")

    @property
    def num_joints(self) -> int:
        return self.leg_count * self.joints_per_leg

    @property
    def action_dim(self) -> int:
        return self.num_joints

    @property
    def amp_dim(self) -> int:
        return 2 * self.num_joints + 6

    @property
    def proprio_dim(self) -> int:
        # angular velocity, projected gravity, q, qdot, previous action
        return 6 + 3 * self.num_joints

    @property
    def privileged_dim(self) -> int:
        return 15 + 3 * self.leg_count + self.leg_count + 3


_FLOAT_KEYS = ("base_mass", "torque_limit", "joint_velocity_limit", "foot_force_limit",
               "reflected_inertia", "desired_body_height")


def _parse_array(text: str) -> np.ndarray:
    rows = [r.split() for r in text.split(";")]
    arr = np.array([[float(v) for v in r] for r in rows if r])
    return arr[0] if len(rows) == 1 else arr


def parse_model(text: str) -> RobotModel:
    """Parse the ``key = value`` model format (``;`` separates matrix rows)."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    try:
        L = int(raw["leg_count"])
        jpl = int(raw["joints_per_leg"])
        kw = dict(
            name=raw.get("name", "robot"),
            leg_count=L,
            joints_per_leg=jpl,
            hip_offsets=_parse_array(raw["hip_offsets"]).reshape(L, 3),
            hip_mount_angles=_parse_array(raw["hip_mount_angles"]).reshape(L),
            link_lengths=_parse_array(raw["link_lengths"]).reshape(3),
            base_inertia=_parse_array(raw["base_inertia"]).reshape(3, 3),
            base_half_extents=_parse_array(raw["base_half_extents"]).reshape(3),
            nominal_joint_positions=np.tile(_parse_array(raw["nominal_leg_joints"]).reshape(jpl), L),
            joint_limits=np.tile(_parse_array(raw["leg_joint_limits"]).reshape(jpl, 2), (L, 1)),
            gait_offsets=_parse_array(raw.get("gait_offsets", " ".join(["0"] * L))).reshape(L),
        )
        for key in _FLOAT_KEYS:
            if key in raw:
                kw[key] = float(raw[key])
    except KeyError as exc:
        raise ValueError(f"model file missing key {exc.args[0]!r}") from None
    return RobotModel(**kw)


def load_model(path) -> RobotModel:
    return parse_model(Path(path).read_text())


def builtin_model(name: str) -> RobotModel:
    """``"hexapod"`` or ``"quadruped"``."""
    text = resources.files("twostage.models").joinpath(f"{name}.model").read_text()
    return parse_model(text)


# ----------------------------------------------------------------------------
# simulation parameters


@dataclass(frozen=True)
class SimConfig:
    control_dt: float = 0.02
    physics_substeps: int = 6
    contact_stiffness: float = 5000.0
    contact_damping: float = 100.0
    friction_damping: float = 100.0
    gravity: float = 9.81
    kp: float = 80.0
    kd: float = 1.0

    def __post_init__(self):
        if self.physics_substeps < 1:
            raise ValueError("physics_substeps must be >= 1")
        if self.control_dt <= 0:
            raise ValueError("control_dt must be positive")

    @property
    def substep_dt(self) -> float:
        return self.control_dt / self.physics_substeps


@dataclass(frozen=True)
class RandomizationRanges:
    link_mass_scale: tuple = (0.8, 1.2)
    payload_mass: tuple = (0.0, 5.0)
    payload_offset: tuple = (-0.1, 0.1)
    ground_friction: tuple = (0.05, 2.75)
    motor_strength_scale: tuple = (0.8, 1.2)
    kp_scale: tuple = (0.8, 1.2)
    kd_scale: tuple = (0.8, 1.2)
    joint_position_scale: tuple = (0.5, 1.5)

    @classmethod
    def nominal(cls) -> "RandomizationRanges":
        """All ranges collapsed onto the nominal (identity) values."""
        return cls((1.0, 1.0), (0.0, 0.0), (0.0, 0.0), (1.0, 1.0),
                   (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


@dataclass
class DynamicsRandomization:
    """Per-environment dynamics parameters; every field has a leading env axis."""

    link_mass_scale: np.ndarray
    payload_mass: np.ndarray
    payload_offset: np.ndarray  # (N, 3)
    ground_friction: np.ndarray
    motor_strength_scale: np.ndarray
    kp_scale: np.ndarray
    kd_scale: np.ndarray
    joint_position_scale: np.ndarray  # (N, J) applied at reset

    @classmethod
    def identity(cls, num_envs: int, num_joints: int) -> "DynamicsRandomization":
        one = np.ones(num_envs)
        return cls(one.copy(), np.zeros(num_envs), np.zeros((num_envs, 3)), one.copy(),
                   one.copy(), one.copy(), one.copy(), np.ones((num_envs, num_joints)))

    def subset(self, idx) -> "DynamicsRandomization":
        return DynamicsRandomization(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def assign(self, idx, other: "DynamicsRandomization") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)


def sample_randomization(rng: np.random.Generator, num_envs: int, num_joints: int,
                         ranges: RandomizationRanges | None = None) -> DynamicsRandomization:
    r = ranges or RandomizationRanges()

    def u(lohi, shape):
        lo, hi = lohi
        return rng.uniform(lo, hi, size=shape) if hi > lo else np.full(shape, float(lo))

    n = num_envs
    return DynamicsRandomization(
        link_mass_scale=u(r.link_mass_scale, n),
        payload_mass=u(r.payload_mass, n),
        payload_offset=u(r.payload_offset, (n, 3)),
        ground_friction=u(r.ground_friction, n),
        motor_strength_scale=u(r.motor_strength_scale, n),
        kp_scale=u(r.kp_scale, n),
        kd_scale=u(r.kd_scale, n),
        joint_position_scale=u(r.joint_position_scale, (n, num_joints)),
    )


# ----------------------------------------------------------------------------
# state


@dataclass
class RobotState:
    base_position: np.ndarray  # (N, 3)
    base_orientation: np.ndarray  # (N, 4) unit quaternion, w first
    base_linear_velocity: np.ndarray  # (N, 3) world frame
    base_angular_velocity: np.ndarray  # (N, 3) world frame
    joint_positions: np.ndarray  # (N, J)
    joint_velocities: np.ndarray
    joint_accelerations: np.ndarray
    joint_torques: np.ndarray
    foot_positions: np.ndarray  # (N, L, 3) world
    foot_velocities: np.ndarray  # (N, L, 3) world
    foot_contact_forces: np.ndarray  # (N, L, 3)
    collision_count: np.ndarray  # (N,) int
    leg_collisions: np.ndarray  # (N, L) bool
    base_collision: np.ndarray  # (N,) bool

    CONTACT_THRESHOLD = 1.0  # N

    @property
    def num_envs(self) -> int:
        return self.base_position.shape[0]

    @property
    def body_linear_velocity(self):
        return quat_rotate_inverse(self.base_orientation, self.base_linear_velocity)

    @property
    def body_angular_velocity(self):
        return quat_rotate_inverse(self.base_orientation, self.base_angular_velocity)

    @property
    def foot_contacts(self):
        return self.foot_contact_forces[..., 2] > self.CONTACT_THRESHOLD

    def copy(self) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def assign(self, idx, other: "RobotState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)


def pd_torque(q_target, q, qd, kp, kd, torque_limit):
    """Joint PD law with zero target velocity, saturated at ``torque_limit``."""
    tau = kp * (np.asarray(q_target) - q) - kd * np.asarray(qd)
    return np.clip(tau, -torque_limit, torque_limit)


# ----------------------------------------------------------------------------
# kinematics


def leg_kinematics(model: RobotModel, q):
    """Foot positions, knee positions and foot Jacobians in the base frame.

    Returns ``feet (N, L, 3)``, ``knees (N, L, 3)``, ``jac (N, L, 3, 3)``
    where ``jac[..., :, k]`` is the derivative with respect to leg joint k.
    """
    n = q.shape[0]
    qq = q.reshape(n, model.leg_count, 3)
    l1, l2, l3 = model.link_lengths
    yaw = model.hip_mount_angles + qq[..., 0]
    b = qq[..., 1]
    bg = b + qq[..., 2]
    cy, sy = np.cos(yaw), np.sin(yaw)
    knee_r = l1 + l2 * np.cos(b)
    knee_z = l2 * np.sin(b)
    rho = knee_r + l3 * np.cos(bg)
    z = knee_z + l3 * np.sin(bg)
    hips = model.hip_offsets
    feet = hips + np.stack([rho * cy, rho * sy, z], axis=-1)
    knees = hips + np.stack([knee_r * cy, knee_r * sy, knee_z], axis=-1)
    d_rho_b = -z
    d_z_b = rho - l1
    d_rho_g = -l3 * np.sin(bg)
    d_z_g = l3 * np.cos(bg)
    jac = np.empty((n, model.leg_count, 3, 3))
    jac[..., 0, 0] = -rho * sy
    jac[..., 1, 0] = rho * cy
    jac[..., 2, 0] = 0.0
    jac[..., 0, 1] = d_rho_b * cy
    jac[..., 1, 1] = d_rho_b * sy
    jac[..., 2, 1] = d_z_b
    jac[..., 0, 2] = d_rho_g * cy
    jac[..., 1, 2] = d_rho_g * sy
    jac[..., 2, 2] = d_z_g
    return feet, knees, jac


def _base_corners(model: RobotModel):
    hx, hy, hz = model.base_half_extents
    return np.array([[hx, hy, -hz], [hx, -hy, -hz], [-hx, hy, -hz], [-hx, -hy, -hz]])


def _world_kinematics(model, base_pos, quat, lin_vel, ang_vel, q, qd, with_jacobian=False):
    feet_b, knees_b, jac = leg_kinematics(model, q)
    n = q.shape[0]
    rot = quat_to_matrix(quat)
    L = model.leg_count
    rot_t = rot.transpose(0, 2, 1)
    rel_vel_b = (jac @ qd.reshape(n, L, 3, 1))[..., 0]
    out = np.concatenate([feet_b, knees_b, rel_vel_b], axis=1) @ rot_t
    feet_r, knees_r = out[:, :L], out[:, L:2 * L]
    feet_v = lin_vel[:, None, :] + cross(ang_vel[:, None, :], feet_r) + out[:, 2 * L:]
    if with_jacobian:
        return rot, feet_r, knees_r, feet_v, jac
    return rot, feet_r, knees_r, feet_v


def initial_state(model: RobotModel, base_position, base_orientation, joint_positions) -> RobotState:
    """A state at rest with the given pose; derived quantities filled in."""
    base_position = np.atleast_2d(np.asarray(base_position, dtype=float))
    quat = np.atleast_2d(np.asarray(base_orientation, dtype=float))
    q = np.atleast_2d(np.asarray(joint_positions, dtype=float))
    n = base_position.shape[0]
    zeros3 = np.zeros((n, 3))
    zj = np.zeros_like(q)
    _, feet_r, _, feet_v = _world_kinematics(model, base_position, quat, zeros3, zeros3, q, zj)
    L = model.leg_count
    return RobotState(
        base_position=base_position.copy(),
        base_orientation=quat.copy(),
        base_linear_velocity=zeros3.copy(),
        base_angular_velocity=zeros3.copy(),
        joint_positions=q.copy(),
        joint_velocities=zj.copy(),
        joint_accelerations=zj.copy(),
        joint_torques=zj.copy(),
        foot_positions=base_position[:, None, :] + feet_r,
        foot_velocities=feet_v,
        foot_contact_forces=np.zeros((n, L, 3)),
        collision_count=np.zeros(n, dtype=int),
        leg_collisions=np.zeros((n, L), dtype=bool),
        base_collision=np.zeros(n, dtype=bool),
    )


def _contact_forces(points, vels, ground_h, mu, cfg: SimConfig):
    """Spring-damper normal force and Coulomb-capped viscous friction."""
    depth = ground_h - points[..., 2]
    inside = depth > 0.0
    fn = np.where(inside, np.maximum(0.0, cfg.contact_stiffness * depth - cfg.contact_damping * vels[..., 2]), 0.0)
    ft = -cfg.friction_damping * vels[..., :2] * inside[..., None]
    ft_norm = np.linalg.norm(ft, axis=-1)
    cap = mu * fn
    scale = np.where(ft_norm > cap, cap / np.maximum(ft_norm, 1e-300), 1.0)
    ft = ft * scale[..., None]
    return np.concatenate([ft, fn[..., None]], axis=-1)


def _ground(terrain, xy):
    if terrain is None:
        return np.full(xy.shape[:-1], -np.inf)
    h, _ = height_at(terrain, xy[..., 0], xy[..., 1])
    return h


def step(model: RobotModel, state: RobotState, action, terrain: TerrainMap | None,
         randomization: DynamicsRandomization, config: SimConfig = SimConfig(),
         strict: bool = True) -> RobotState:
    """Advance every environment by one control step.

    ``action`` holds joint-position offsets (rad) added to the nominal pose.
    ``terrain=None`` simulates contact-free flight. With ``strict`` a
    non-finite result raises :class:`NonFiniteStateError`; the exception
    carries the offending field, env ids and the computed state.
    """
    action = np.asarray(action, dtype=float)
    n = state.num_envs
    if action.shape != (n, model.num_joints):
        raise ValueError(f"action shape {action.shape} != {(n, model.num_joints)}")
    rnd = randomization
    L = model.leg_count
    dt = config.substep_dt
    g = config.gravity

    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    q_target = np.clip(model.nominal_joint_positions + action, lo, hi)
    strength = rnd.motor_strength_scale[:, None]
    kp = (config.kp * rnd.kp_scale)[:, None] * strength
    kd = (config.kd * rnd.kd_scale)[:, None] * strength

    mass = model.base_mass * rnd.link_mass_scale + rnd.payload_mass
    off = rnd.payload_offset
    inertia = model.base_inertia[None] * rnd.link_mass_scale[:, None, None]
    inertia = inertia + rnd.payload_mass[:, None, None] * (
        np.einsum("ni,ni->n", off, off)[:, None, None] * np.eye(3) - np.einsum("ni,nj->nij", off, off))
    inertia_inv = np.linalg.inv(inertia)
    mu = rnd.ground_friction[:, None]
    corners_b = _base_corners(model)
    grav_acc = np.array([0.0, 0.0, -g])

    pos = state.base_position.copy()
    quat = state.base_orientation.copy()
    vel = state.base_linear_velocity.copy()
    omega = state.base_angular_velocity.copy()
    q = state.joint_positions.copy()
    qd = state.joint_velocities.copy()
    qd_old = qd.copy()

    def accelerations(pos, quat, vel, omega, q, qd):
        rot, feet_r, knees_r, feet_v, jac = _world_kinematics(model, pos, quat, vel, omega, q, qd, True)
        # base corners and knees touch the ground too; their forces are not
        # reported as foot forces
        body_r = np.concatenate([corners_b @ rot.transpose(0, 2, 1), knees_r], axis=1)
        body_v = vel[:, None, :] + cross(omega[:, None, :], body_r)
        pts_r = np.concatenate([feet_r, body_r], axis=1)
        pts_w = pos[:, None, :] + pts_r
        pts_v = np.concatenate([feet_v, body_v], axis=1)
        f = _contact_forces(pts_w, pts_v, _ground(terrain, pts_w[..., :2]), mu, config)
        force = f.sum(1) + mass[:, None] * grav_acc
        torque = cross(pts_r, f).sum(1)
        payload_r = (rot @ off[:, :, None])[..., 0]
        torque = torque + cross(payload_r, rnd.payload_mass[:, None] * grav_acc)
        rot_t = rot.transpose(0, 2, 1)
        omega_b = (rot_t @ omega[:, :, None])[..., 0]
        torque_b = (rot_t @ torque[:, :, None])[..., 0]
        i_omega = (inertia @ omega_b[:, :, None])[..., 0]
        alpha_b = (inertia_inv @ (torque_b - cross(omega_b, i_omega))[:, :, None])[..., 0]
        # ground reaction on each foot loads its leg joints: tau = J^T f (body frame)
        f_feet_b = f[:, :L] @ rot
        tau_contact = np.einsum("nlik,nli->nlk", jac, f_feet_b).reshape(n, -1)
        return force / mass[:, None], (rot @ alpha_b[:, :, None])[..., 0], f[:, :L], tau_contact

    # velocity Verlet (kick-drift-kick); exact for free flight and keeps
    # resting states at rest
    acc, alpha, _, tau_contact = accelerations(pos, quat, vel, omega, q, qd)
    foot_force_sum = np.zeros((n, L, 3))
    tau_sum = np.zeros_like(q)
    for _ in range(config.physics_substeps):
        vel_half = vel + 0.5 * dt * acc
        omega_half = omega + 0.5 * dt * alpha

        tau = pd_torque(q_target, q, qd, kp, kd, model.torque_limit)
        tau_sum += tau
        qd = qd + dt * (tau + tau_contact) / model.reflected_inertia
        q = q + dt * qd
        below, above = q < lo, q > hi
        q = np.clip(q, lo, hi)
        qd = np.where((below & (qd < 0)) | (above & (qd > 0)), 0.0, qd)

        pos = pos + dt * vel_half
        quat = quat_mul(_quat_exp_step(omega_half, dt), quat)
        quat = quat / np.linalg.norm(quat, axis=-1, keepdims=True)

        acc, alpha, f_feet, tau_contact = accelerations(pos, quat, vel_half, omega_half, q, qd)
        foot_force_sum += f_feet
        vel = vel_half + 0.5 * dt * acc
        omega = omega_half + 0.5 * dt * alpha

    rot, feet_r, knees_r, feet_v = _world_kinematics(model, pos, quat, vel, omega, q, qd)
    feet_w = pos[:, None, :] + feet_r
    knees_w = pos[:, None, :] + knees_r
    corners_w = pos[:, None, :] + corners_b @ rot.transpose(0, 2, 1)
    leg_coll = knees_w[..., 2] < _ground(terrain, knees_w[..., :2])
    base_coll = np.any(corners_w[..., 2] < _ground(terrain, corners_w[..., :2]), axis=1)

    new = RobotState(
        base_position=pos,
        base_orientation=quat,
        base_linear_velocity=vel,
        base_angular_velocity=omega,
        joint_positions=q,
        joint_velocities=qd,
        joint_accelerations=(qd - qd_old) / config.control_dt,
        joint_torques=tau_sum / config.physics_substeps,
        foot_positions=feet_w,
        foot_velocities=feet_v,
        foot_contact_forces=foot_force_sum / config.physics_substeps,
        collision_count=leg_coll.sum(1) + base_coll.astype(int),
        leg_collisions=leg_coll,
        base_collision=base_coll,
    )
    if strict:
        bad = find_nonfinite(new)
        if bad is not None:
            raise NonFiniteStateError(bad[0], bad[1], new)
    return new


def find_nonfinite(state: RobotState):
    """First field holding a non-finite value and the env ids affected."""
    for f in fields(state):
        arr = getattr(state, f.name)
        if arr.dtype.kind != "f":
            continue
        ok = np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
        if not ok.all():
            return f.name, np.flatnonzero(~ok)
    return None


# ----------------------------------------------------------------------------
# trajectory dump


def trajectory_columns(model: RobotModel) -> list[str]:
    J, L = model.num_joints, model.leg_count
    cols = ["time", "px", "py", "pz", "qw", "qx", "qy", "qz",
            "vx", "vy", "vz", "wx", "wy", "wz"]
    cols += [f"q{j}" for j in range(J)] + [f"qd{j}" for j in range(J)] + [f"tau{j}" for j in range(J)]
    cols += [f"f{leg}{ax}" for leg in range(L) for ax in "xyz"]
    cols += [f"contact{leg}" for leg in range(L)]
    return cols


def write_trajectory_csv(path, model: RobotModel, times, states: list[RobotState], env: int = 0) -> None:
    """One row per control step: time, pose, twist, q, qdot, tau, foot forces, contacts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_columns(model))
        for t, s in zip(times, states):
            row = [t, *s.base_position[env], *s.base_orientation[env], *s.base_linear_velocity[env],
                   *s.base_angular_velocity[env], *s.joint_positions[env], *s.joint_velocities[env],
                   *s.joint_torques[env], *s.foot_contact_forces[env].reshape(-1),
                   *s.foot_contacts[env].astype(int)]
            w.writerow([repr(float(v)) for v in row])


__all__ = [
    "RobotModel", "RobotState", "SimConfig", "DynamicsRandomization", "RandomizationRanges",
    "NonFiniteStateError", "pd_torque", "step", "projected_gravity", "sample_randomization",
    "initial_state", "leg_kinematics", "builtin_model", "load_model", "parse_model",
    "write_trajectory_csv", "trajectory_columns", "quat_from_euler", "quat_to_euler",
    "quat_rotate", "quat_rotate_inverse", "quat_from_axis_angle", "quat_mul", "find_nonfinite",
]
