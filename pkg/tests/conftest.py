import numpy as np
import pytest

from twostage import dynamics as dyn


@pytest.fixture(scope="session")
def hexapod():
    return dyn.builtin_model("hexapod")


@pytest.fixture(scope="session")
def quadruped():
    return dyn.builtin_model("quadruped")


def random_unit_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_state(model, rng, n, tilt=True):
    """Arbitrary (not physically consistent) state with every field populated."""
    J, L = model.num_joints, model.leg_count
    if tilt:
        quat = random_unit_quaternions(rng, n)
    else:
        quat = dyn.quat_from_euler(np.zeros(n), np.zeros(n), rng.uniform(-np.pi, np.pi, n))
    return dyn.RobotState(
        base_position=rng.normal(0, 0.3, (n, 3)),
        base_orientation=quat,
        base_linear_velocity=rng.normal(0, 0.7, (n, 3)),
        base_angular_velocity=rng.normal(0, 0.7, (n, 3)),
        joint_positions=rng.normal(0, 0.5, (n, J)),
        joint_velocities=rng.normal(0, 15.0, (n, J)),
        joint_accelerations=rng.normal(0, 300.0, (n, J)),
        joint_torques=rng.normal(0, 15.0, (n, J)),
        foot_positions=rng.normal(0, 0.3, (n, L, 3)),
        foot_velocities=rng.normal(0, 0.5, (n, L, 3)),
        foot_contact_forces=np.abs(rng.normal(0, 60.0, (n, L, 3))),
        collision_count=rng.integers(0, 4, n),
        leg_collisions=rng.random((n, L)) < 0.2,
        base_collision=rng.random(n) < 0.1,
    )
