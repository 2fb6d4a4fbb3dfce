import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostage import dynamics as dyn
from twostage import rewards as rw

from conftest import random_state
from oracles import SCALES, reward_terms


def _state_with(model, n=1, **fields):
    s = dyn.initial_state(model, np.tile([0, 0, model.desired_body_height], (n, 1)),
                          np.tile([1.0, 0, 0, 0], (n, 1)), np.tile(model.nominal_joint_positions, (n, 1)))
    for k, v in fields.items():
        getattr(s, k)[...] = v
    return s


def test_table_scales_match_reference():
    assert rw.TABLE_SCALES == SCALES
    cfg = rw.RewardConfig()
    assert cfg.matches_table()
    assert cfg.scale("raibert") == pytest.approx(10 * 0.02, abs=0)


def test_tracking_examples(hexapod):
    s = _state_with(hexapod)
    lin, ang = rw.task_rewards(s, np.zeros((1, 3)))
    assert lin[0] == 1.0 and ang[0] == 1.0
    s = _state_with(hexapod, base_linear_velocity=[0.2, 0.4, 0.0])
    lin, _ = rw.task_rewards(s, np.array([[0.5, 0.0, 0.0]]))
    assert lin[0] == pytest.approx(math.exp(-0.25 / 0.15), abs=1e-15)
    assert lin[0] == pytest.approx(0.1889, abs=1e-4)
    # error^2 at the bandwidth gives 1/e
    s = _state_with(hexapod, base_angular_velocity=[0, 0, math.sqrt(0.15)])
    _, ang = rw.task_rewards(s, np.zeros((1, 3)))
    assert ang[0] == pytest.approx(math.exp(-1), abs=1e-12)


def test_regularization_examples(hexapod):
    s = _state_with(hexapod)
    a = np.zeros((1, 18))
    terms = rw.regularization_rewards(s, a, a, hexapod)
    assert all(v[0] == 0.0 for v in terms.values()), terms
    s = _state_with(hexapod, base_linear_velocity=[0, 0, 0.3])
    terms = rw.regularization_rewards(s, a, a, hexapod)
    assert terms["lin_vel_z"][0] == pytest.approx(-0.09, abs=1e-15)
    assert terms["lin_vel_z"][0] * rw.RewardConfig().scale("lin_vel_z") == pytest.approx(-0.0036, abs=1e-15)
    tau = np.zeros((1, 18))
    tau[0, 4] = hexapod.torque_limit + 1
    s = _state_with(hexapod, joint_torques=tau)
    terms = rw.regularization_rewards(s, a, a, hexapod)
    assert terms["torque_limit"][0] == pytest.approx(-1.0, abs=1e-12)
    assert terms["torque_limit"][0] * rw.RewardConfig().scale("torque_limit") == pytest.approx(-0.01 * 0.02)


def test_contact_schedule_examples(hexapod):
    sched = rw.GaitSchedule.for_model(hexapod)
    # offset 0 foot at phase 0.25 and 0.75
    assert rw.contact_schedule(sched, 0, 0.25 * sched.period) == 1.0
    assert rw.contact_schedule(sched, 0, 0.75 * sched.period) == 0.0
    t = np.linspace(0, sched.period, 401)
    ca, cb = rw.contact_schedule(sched, 0, t), rw.contact_schedule(sched, 1, t)
    phase = np.mod(t / sched.period, 1.0)
    away = np.minimum.reduce([np.abs(phase - x) for x in (0.0, 0.5, 1.0)]) > sched.band / 2
    np.testing.assert_allclose((ca + cb)[away], 1.0, atol=0)
    # symmetric smoothstep ramps keep the sum at one even inside the bands
    np.testing.assert_allclose(ca + cb, 1.0, atol=1e-12)


@given(st.floats(0, 10), st.integers(0, 5))
def test_contact_schedule_periodic_and_bounded(t, foot):
    sched = rw.GaitSchedule(np.array([0, .5, 0, .5, 0, .5]))
    c = rw.contact_schedule(sched, foot, t)
    assert 0.0 <= c <= 1.0
    assert rw.contact_schedule(sched, foot, t + sched.period) == pytest.approx(c, abs=1e-9)


def test_tripod_groups_are_antiphase(hexapod):
    C = rw.GaitSchedule.for_model(hexapod).desired_contact(np.array([0.1]))[0]
    assert list(C) == [1.0, 0.0, 1.0, 0.0, 1.0, 0.0]


def test_gait_examples(hexapod):
    sched = rw.GaitSchedule.for_model(hexapod)
    cfg = rw.RewardConfig.for_model(hexapod)
    t = np.array([0.1 * sched.period])  # feet 0,2,4 stance; 1,3,5 swing
    cmd = np.array([[0.3, -0.1, 0.4]])
    s = _state_with(hexapod)
    s.foot_contact_forces[:] = 0.0
    s.foot_velocities[:] = 0.0
    target = rw.raibert_targets(hexapod, sched, t, cmd, cfg)[0]
    s.foot_positions[0, :, :2] = s.base_position[0, :2] + target
    heights = np.full((1, 6), cfg.swing_apex_height)
    g = rw.gait_rewards(s, sched, t, cmd, hexapod, cfg, foot_heights=heights)
    assert g["swing_force"][0] == pytest.approx(3.0)
    assert g["stance_velocity"][0] == pytest.approx(3.0)
    assert g["raibert"][0] == pytest.approx(0.0, abs=1e-24)
    assert g["footswing_height"][0] == 0.0


def test_raibert_lead_at_touchdown(hexapod):
    sched = rw.GaitSchedule.for_model(hexapod)
    cfg = rw.RewardConfig.for_model(hexapod)
    cmd = np.array([[0.4, 0.0, 0.0]])
    target = rw.raibert_targets(hexapod, sched, np.array([0.0]), cmd, cfg)[0]
    nominal = rw.nominal_foot_xy(hexapod, cfg.stance_width)
    # foot 0 touches down at t=0: target leads by half the stance travel
    np.testing.assert_allclose(target[0], nominal[0] + [0.5 * sched.stance_time * 0.4, 0.0], atol=1e-15)
    assert abs(nominal[0, 1]) == pytest.approx(abs(hexapod.hip_offsets[0, 1]) + cfg.stance_width)


def test_reward_terms_match_oracle(hexapod):
    """Every term against a loop-by-loop reference implementation."""
    rng = np.random.default_rng(7)
    n = 200
    s = random_state(hexapod, rng, n)
    cfg = rw.RewardConfig.for_model(hexapod)
    sched = rw.GaitSchedule.for_model(hexapod)
    cmd = rng.uniform(-1, 1, (n, 3))
    pa, a = rng.normal(size=(n, 18)), rng.normal(size=(n, 18))
    t = rng.uniform(0, 5, n)
    bh = rng.uniform(0, 0.5, n)
    fh = rng.uniform(-0.05, 0.2, (n, 6))
    terms = {}
    terms.update(dict(zip(("lin_vel_tracking", "ang_vel_tracking"), rw.task_rewards(s, cmd, cfg))))
    terms.update(rw.regularization_rewards(s, pa, a, hexapod, cfg, base_height=bh))
    terms.update(rw.gait_rewards(s, sched, t, cmd, hexapod, cfg, foot_heights=fh))
    for i in range(n):
        ref = reward_terms(hexapod, s, i, cmd[i], pa[i], a[i], t[i], bh[i], fh[i])
        for k, v in ref.items():
            assert terms[k][i] == pytest.approx(v, rel=1e-10, abs=1e-10), (k, i)


def test_bounds_and_signs(hexapod):
    rng = np.random.default_rng(3)
    s = random_state(hexapod, rng, 300)
    cmd = rng.uniform(-1, 1, (300, 3))
    lin, ang = rw.task_rewards(s, cmd)
    assert np.all((lin > 0) & (lin <= 1)) and np.all((ang > 0) & (ang <= 1))
    reg = rw.regularization_rewards(s, np.zeros((300, 18)), rng.normal(size=(300, 18)), hexapod)
    assert all(np.all(v <= 0) for v in reg.values())
    g = rw.gait_rewards(s, rw.GaitSchedule.for_model(hexapod), rng.uniform(0, 1, 300), cmd, hexapod)
    assert np.all((g["swing_force"] >= 0) & (g["swing_force"] <= 6))
    assert np.all((g["stance_velocity"] >= 0) & (g["stance_velocity"] <= 6))
    assert np.all(g["raibert"] <= 0) and np.all(g["footswing_height"] <= 0)


@settings(max_examples=50)
@given(st.floats(0, 3), st.floats(0, 3))
def test_lin_tracking_monotone(e1, e2):
    model = dyn.builtin_model("hexapod")
    s = _state_with(model, 2)
    s.base_linear_velocity[:, 0] = [e1, e2]
    lin, _ = rw.task_rewards(s, np.zeros((2, 3)))
    if e1 < e2:
        # non-increasing; strict once the squared errors differ above roundoff
        assert lin[0] >= lin[1]
        if e2 * e2 - e1 * e1 > 1e-12 and lin[1] > 0.0:
            assert lin[0] > lin[1]
    assert lin.max() <= 1.0


def test_total_reward_assembly(hexapod):
    cfg = rw.RewardConfig.for_model(hexapod)
    zeros = {k: np.zeros(1) for k in rw.TASK_TERMS + rw.REGULARIZATION_TERMS + rw.GAIT_TERMS}
    zeros["lin_vel_tracking"] = np.ones(1)
    b = rw.total_reward("I", zeros, cfg)
    assert b.total[0] == pytest.approx(0.02, abs=1e-15)
    stage2 = {k: np.zeros(1) for k in rw.TASK_TERMS + rw.REGULARIZATION_TERMS}
    stage2["lin_vel_tracking"] = np.ones(1)
    stage2["ang_vel_tracking"] = np.ones(1)
    stage2["lin_vel_z"] = np.array([-0.09])
    b = rw.total_reward("II", stage2, cfg, style=np.ones(1))
    assert b.total[0] == pytest.approx((1 + 0.8 + 1) * 0.02 - 0.09 * 2 * 0.02, abs=1e-15)
    assert b.total[0] == pytest.approx(b.task[0] + b.style[0] + b.regularization[0], abs=1e-15)
    with pytest.raises(ValueError):
        rw.total_reward("I", zeros, cfg, style=np.ones(1))
    with pytest.raises(ValueError):
        rw.total_reward("I", stage2, cfg)


def test_breakdown_sum_equals_total(hexapod):
    rng = np.random.default_rng(11)
    terms = {k: rng.normal(size=50) for k in rw.TASK_TERMS + rw.REGULARIZATION_TERMS + rw.GAIT_TERMS}
    b = rw.total_reward("II", terms, style=rng.uniform(0, 1, 50))
    np.testing.assert_allclose(sum(b.scaled.values()), b.total, atol=1e-14)
    cols = b.columns()
    for name in rw.ALL_TERMS:
        assert f"raw/{name}" in cols and f"rew/{name}" in cols


def test_style_reward_examples():
    assert rw.style_reward(1.0) == 1.0
    assert rw.style_reward(-1.0) == 0.0
    assert rw.style_reward(0.0) == 0.75
    assert rw.style_reward(3.0) == 0.0


@given(st.floats(-1e6, 1e6))
def test_style_reward_range(d):
    r = float(rw.style_reward(d))
    assert 0.0 <= r <= 1.0
    assert (r == 1.0) == (d == 1.0) or abs(d - 1.0) < 1e-7
    if abs(d - 1.0) >= 2.0:
        assert r == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        rw.RewardConfig(scales={"nope": 1.0})
    with pytest.raises(ValueError):
        rw.RewardConfig(sigma_cf=0.0)
    with pytest.raises(ValueError):
        rw.GaitSchedule(np.zeros(4), duty_factor=1.0)
