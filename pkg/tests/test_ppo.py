import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostage import nets as N
from twostage import policies as P
from twostage import ppo

from oracles import gae_bruteforce
from toys import PointMassEnv


def _agent(seed, hidden=(32, 32), dtype=np.float64):
    rng = np.random.default_rng(seed)
    keys = ("proprio", "command")
    actor = P.MlpActor(N.Mlp(N.MlpSpec(2, hidden, 1), rng, dtype=dtype, output_gain=0.01), keys)
    policy = P.GaussianPolicy(actor, 1, dtype=dtype)
    critic = P.Critic(N.Mlp(N.MlpSpec(2, hidden, 1), rng, dtype=dtype), keys)
    return policy, critic


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    d = rng.random((10, 3)) < 0.2
    last = rng.normal(size=3)
    adv, ret = ppo.compute_gae(r, v, d, last, 0.9, 0.0)
    v_next = np.concatenate([v[1:], last[None]])
    np.testing.assert_allclose(adv, r + 0.9 * v_next * (1 - d) - v, atol=1e-15)
    np.testing.assert_allclose(ret, adv + v, atol=1e-15)


def test_gae_undiscounted_sum():
    r = np.arange(1.0, 6.0)[:, None]
    adv, _ = ppo.compute_gae(r, np.zeros_like(r), np.zeros_like(r, bool), np.zeros(1), 1.0, 1.0)
    np.testing.assert_allclose(adv[:, 0], [15, 14, 12, 9, 5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_gae_matches_bruteforce(seed, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=10), rng.normal(size=10)
    d = rng.random(10) < 0.25
    last = float(rng.normal())
    adv, ret = ppo.compute_gae(r[:, None], v[:, None], d[:, None], np.array([last]), gamma, lam)
    a_ref, ret_ref = gae_bruteforce(r, v, d, last, gamma, lam)
    np.testing.assert_allclose(adv[:, 0], a_ref, atol=1e-10, rtol=0)
    np.testing.assert_allclose(ret[:, 0], ret_ref, atol=1e-10, rtol=0)


def test_advantage_normalization():
    adv = ppo.normalize_advantages(np.random.default_rng(1).normal(3, 7, 1000))
    assert abs(adv.mean()) < 1e-6 and abs(adv.std() - 1) < 1e-6


def test_surrogate_ratio_one_is_mean_advantage():
    adv = np.random.default_rng(2).normal(size=50)
    obj, _ = ppo.surrogate_grads(np.ones(50), adv, 0.2)
    assert obj.mean() == pytest.approx(adv.mean(), abs=1e-15)


def test_surrogate_clip_kills_gradient():
    obj, g = ppo.surrogate_grads(np.array([1.3, 1.1, 0.7, 0.7]), np.array([1.0, 1.0, -1.0, 1.0]), 0.2)
    assert g[0] == 0.0  # positive advantage, ratio above 1.2
    assert g[1] == pytest.approx(1.1)
    assert g[2] == 0.0  # negative advantage, ratio below 0.8
    assert g[3] == pytest.approx(0.7)  # pessimistic branch stays unclipped
    np.testing.assert_allclose(obj, [1.2, 1.1, -0.8, 0.7])


def test_policy_gradient_matches_finite_difference():
    policy, _ = _agent(3, hidden=(6,))
    rng = np.random.default_rng(4)
    obs = {"proprio": rng.normal(size=(20, 1)), "command": rng.normal(size=(20, 1))}
    mu = policy.mean(obs)
    actions = mu + rng.normal(0, 0.5, mu.shape)
    old = policy.log_prob(mu, actions) + rng.normal(0, 0.1, 20)
    adv = rng.normal(size=20)
    _, grads, _ = ppo.policy_gradients(policy, obs, actions, old, adv, 0.2, 0.01)

    def loss():
        return ppo.policy_gradients(policy, obs, actions, old, adv, 0.2, 0.01)[0]

    assert N.finite_difference_check(loss, policy.params, grads, rng, h=1e-6) < 1e-4


def test_infinite_clip_equals_vanilla_policy_gradient():
    policy, _ = _agent(5, hidden=(8,))
    rng = np.random.default_rng(6)
    obs = {"proprio": rng.normal(size=(30, 1)), "command": rng.normal(size=(30, 1))}
    mu = policy.mean(obs)
    actions = mu + rng.normal(0, 0.6, mu.shape)
    logp = policy.log_prob(mu, actions)
    adv = rng.normal(size=30)
    _, g_ppo, _ = ppo.policy_gradients(policy, obs, actions, logp, adv, 1e12, 0.0)
    # vanilla estimator: -mean(A * grad log pi)
    ls = policy.log_std
    d_mu = -(adv[:, None] * (actions - mu) * np.exp(-2 * ls)) / 30
    g_ref = policy.actor.backward(policy.actor.forward(obs)[1], d_mu)
    d_ls = -np.sum(adv[:, None] * ((actions - mu) ** 2 * np.exp(-2 * ls) - 1), axis=0) / 30
    for a, b in zip(g_ppo, g_ref + [d_ls]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def _train(seed, iters=50):
    env = PointMassEnv(n=16, horizon=40, seed=seed)
    policy, critic = _agent(seed)
    cfg = ppo.PpoConfig(num_envs=16, steps_per_iteration=40, epochs=5, minibatches=4)
    po = N.Adam(policy.params, lr=3e-3, max_grad_norm=1.0)
    co = N.Adam(critic.params, lr=3e-3, max_grad_norm=1.0)
    rng = np.random.default_rng(seed + 100)
    rewards = []
    for _ in range(iters):
        buf = ppo.collect_rollout(policy, critic, env, 40, rng)
        rewards.append(buf.stats["reward"])
        ppo.ppo_update(policy, critic, buf, cfg, po, co, rng)
    return np.array(rewards)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_point_mass_improves(seed):
    r = _train(seed)
    assert r[-5:].mean() > r[:5].mean() + 0.1, r


def test_rollout_shapes_and_determinism():
    def run():
        env = PointMassEnv(n=4, horizon=100, seed=7)
        policy, critic = _agent(8)
        return ppo.collect_rollout(policy, critic, env, 12, np.random.default_rng(9), deterministic=True)

    a, b = run(), run()
    assert a.rewards.shape == (12, 4) and a.actions.shape == (12, 4, 1)
    assert np.array_equal(a.actions, b.actions) and np.array_equal(a.rewards, b.rewards)
    # no episode ended inside the window
    assert not a.dones.any() and a.stats["episodes"] == 0


def test_timeout_bootstrap_added_to_reward():
    env = PointMassEnv(n=2, horizon=3, seed=0)
    policy, critic = _agent(1)
    for p in critic.params:
        p[...] = 0.0
    critic.params[-1][...] = 5.0  # V == 5 everywhere
    buf = ppo.collect_rollout(policy, critic, env, 3, np.random.default_rng(0), gamma=0.5)
    assert buf.dones[2].all() and buf.timeouts[2].all()
    assert np.all(buf.rewards[:2] <= 1.0)
    assert np.all((buf.rewards[2] > 2.5) & (buf.rewards[2] <= 3.5))


def test_all_minibatches_skipped_leaves_params():
    env = PointMassEnv(n=4, horizon=50, seed=0)
    policy, critic = _agent(2)
    rng = np.random.default_rng(0)
    buf = ppo.collect_rollout(policy, critic, env, 8, rng)
    buf.rewards[:] = np.nan
    before = [p.copy() for p in policy.params + critic.params]
    po, co = N.Adam(policy.params), N.Adam(critic.params)
    out = ppo.ppo_update(policy, critic, buf, ppo.PpoConfig(num_envs=4), po, co, rng)
    assert out["updates"] == 0 and out["skipped"] > 0
    for p, q in zip(before, policy.params + critic.params):
        assert np.array_equal(p, q)


def test_config_validation():
    with pytest.raises(ValueError):
        ppo.PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        ppo.PpoConfig(clip_ratio=0)
    cfg = ppo.PpoConfig()
    assert (cfg.clip_ratio, cfg.epochs, cfg.minibatches, cfg.gamma, cfg.lam) == (0.2, 5, 4, 0.99, 0.95)
    assert (cfg.entropy_coef, cfg.value_coef, cfg.max_episode_steps) == (0.01, 0.5, 1000)
