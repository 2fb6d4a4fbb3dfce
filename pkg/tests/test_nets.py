import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostage import nets as N


def test_architecture_widths(hexapod):
    a = N.architecture(hexapod)
    assert a["stage1_actor"].hidden == (128, 128, 64)
    assert a["stage1_critic"].hidden == (128, 256, 128)
    assert a["low_level"].hidden == (256, 128, 64) and a["low_level"].output_activation == "tanh"
    assert a["stage2_critic"].hidden == (512, 256, 128)
    assert a["priv_encoder"].hidden == (64, 32) and a["priv_encoder"].output_dim == 8
    assert a["terrain_encoder"].hidden == (256, 128) and a["terrain_encoder"].output_dim == 16
    assert a["memory_head"].output_dim == 24
    assert a["memory"].hidden == (256, 256, 256)
    assert a["discriminator"].hidden == (1024, 512) and a["discriminator"].output_dim == 1
    assert a["discriminator"].output_activation == "identity"


def test_spec_validation():
    with pytest.raises(ValueError):
        N.MlpSpec(3, (0,), 1)
    with pytest.raises(ValueError):
        N.MlpSpec(3, (4,), 1, activation="relu")
    with pytest.raises(ValueError):
        N.LstmSpec(0)


def test_zero_weights_give_zero():
    for out_act in ("identity", "tanh"):
        net = N.Mlp(N.MlpSpec(5, (7, 3), 2, output_activation=out_act))
        for p in net.params:
            p[...] = 0
        assert np.all(net(np.random.default_rng(0).normal(size=(4, 5))) == 0)


def test_elu_example():
    net = N.Mlp(N.MlpSpec(1, (1,), 1), params=[np.eye(1), np.zeros(1), np.eye(1), np.zeros(1)])
    assert net(np.array([[-1.0]]))[0, 0] == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert net(np.array([[2.0]]))[0, 0] == 2.0


def test_elu_c1_at_zero():
    eps = 1e-8
    assert abs(N.elu(eps) - N.elu(-eps)) < 3e-8
    slope_l = (N.elu(0.0) - N.elu(-eps)) / eps
    slope_r = (N.elu(eps) - N.elu(0.0)) / eps
    assert slope_l == pytest.approx(1.0, abs=1e-6) and slope_r == pytest.approx(1.0, abs=1e-6)


def test_forward_pure_and_shape_errors():
    net = N.Mlp(N.MlpSpec(6, (8, 8), 3), np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(10, 6))
    a, b = net(x), net(x)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="6"):
        net(np.zeros((10, 5)))
    _, cache = net.forward(x)
    with pytest.raises(ValueError):
        net.backward(cache, np.zeros((9, 3)))


def test_tanh_output_bounded():
    net = N.Mlp(N.MlpSpec(4, (16,), 3, output_activation="tanh"), np.random.default_rng(0), output_gain=50.0)
    y = net(np.random.default_rng(1).normal(0, 10, (200, 4)))
    assert np.all(np.abs(y) <= 1.0)


def test_linear_chain_rule():
    net = N.Mlp(N.MlpSpec(1, (), 1), params=[np.array([[1.7]]), np.zeros(1)])
    x = np.array([[0.3]])
    _, cache = net.forward(x)
    grads, gx = net.backward(cache, np.array([[2.0]]))
    assert grads[0][0, 0] == pytest.approx(0.3 * 2.0)
    assert gx[0, 0] == pytest.approx(1.7 * 2.0)


def test_zero_output_gradient():
    net = N.Mlp(N.MlpSpec(3, (5,), 2), np.random.default_rng(0))
    _, cache = net.forward(np.ones((4, 3)))
    grads, gx = net.backward(cache, np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(gx == 0)


def _mlp_fd(spec, seed, batch=5):
    rng = np.random.default_rng(seed)
    net = N.Mlp(spec, rng, output_gain=1.0)
    for p in net.params[1::2]:
        p[...] = rng.normal(0, 0.3, p.shape)
    x = rng.normal(size=(batch, spec.input_dim))
    w = rng.normal(size=(batch, spec.output_dim))

    def loss():
        return float(np.sum(w * net(x)))

    _, cache = net.forward(x)
    grads, gx = net.backward(cache, w)
    err = N.finite_difference_check(loss, net.params, grads, rng)
    # input gradient as well
    xin = [x]
    err_x = N.finite_difference_check(lambda: float(np.sum(w * net(xin[0]))), xin, [gx], rng)
    return max(err, err_x)


@pytest.mark.parametrize("name", ["stage1_actor", "stage1_critic", "low_level", "stage2_critic",
                                  "priv_encoder", "terrain_encoder", "memory_head"])
def test_table_networks_match_finite_differences(hexapod, name):
    spec = N.architecture(hexapod)[name]
    assert _mlp_fd(spec, 3) < 1e-4


def test_discriminator_finite_difference_reduced_width(hexapod):
    # full 1024x512 width is exercised in the amp tests; here the same structure, smaller
    d = N.architecture(hexapod)["discriminator"]
    assert _mlp_fd(N.MlpSpec(d.input_dim, (64, 32), 1), 4) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["elu", "tanh"]), st.sampled_from(["identity", "tanh"]))
def test_random_mlp_gradients(seed, act, out_act):
    spec = N.MlpSpec(4, (6, 5), 3, activation=act, output_activation=out_act)
    assert _mlp_fd(spec, seed) < 1e-4


def test_gradient_penalty_matches_finite_difference():
    rng = np.random.default_rng(5)
    net = N.Mlp(N.MlpSpec(6, (12, 8), 1), rng)
    for p in net.params[1::2]:
        p[...] = rng.normal(0, 0.5, p.shape)
    x = rng.normal(size=(7, 6))
    pen, grads, _, gx = net.input_grad_penalty(x, coef=10.0)
    _, gx_ref, _ = net.input_gradient(x)
    np.testing.assert_allclose(gx, gx_ref)

    def loss():
        _, g, _ = net.input_gradient(x)
        return 5.0 * np.sum(g * g) / 7

    assert pen == pytest.approx(loss())
    assert N.finite_difference_check(loss, net.params, grads, rng) < 1e-4


def test_lstm_zero_weights():
    lstm = N.Lstm(N.LstmSpec(4, (6, 6)))
    for p in lstm.params:
        p[...] = 0
    h, c = lstm.initial_state(3)
    m, h1, c1 = lstm.step(np.ones((3, 4)), h, c)
    assert np.all(m == 0) and all(np.all(a == 0) for a in h1 + c1)


def test_lstm_state_threading():
    rng = np.random.default_rng(0)
    lstm = N.Lstm(N.LstmSpec(3, (5, 4)), rng)
    xs = rng.normal(size=(2, 2, 3))
    h, c = lstm.initial_state(2)
    m0, h, c = lstm.step(xs[0], h, c)
    m1, h, c = lstm.step(xs[1], h, c)
    out, (hT, cT), _ = lstm.forward(xs)
    np.testing.assert_array_equal(out[0], m0)
    np.testing.assert_array_equal(out[1], m1)
    assert all(np.array_equal(a, b) for a, b in zip(hT, h))


def test_lstm_resets_zero_state():
    rng = np.random.default_rng(1)
    lstm = N.Lstm(N.LstmSpec(3, (4,)), rng)
    xs = rng.normal(size=(4, 2, 3))
    resets = np.zeros((4, 2), bool)
    resets[2, 1] = True
    out, _, _ = lstm.forward(xs, resets=resets)
    fresh, _, _ = lstm.forward(xs[2:, 1:2])
    np.testing.assert_allclose(out[2:, 1:2], fresh, atol=1e-15)


def test_lstm_dim_mismatch():
    lstm = N.Lstm(N.LstmSpec(3, (4,)))
    with pytest.raises(ValueError):
        lstm.forward(np.zeros((2, 1, 5)))
    with pytest.raises(ValueError):
        lstm.step(np.zeros((2, 3)), [np.zeros((3, 4))], [np.zeros((3, 4))])


def test_lstm_bptt_five_steps_finite_difference():
    rng = np.random.default_rng(2)
    lstm = N.Lstm(N.LstmSpec(4, (6, 5, 3)), rng)
    xs = rng.normal(size=(5, 3, 4))
    w = rng.normal(size=(5, 3, 3))
    h0 = [rng.normal(0, 0.5, (3, H)) for H in lstm.spec.hidden]
    c0 = [rng.normal(0, 0.5, (3, H)) for H in lstm.spec.hidden]
    resets = np.zeros((5, 3), bool)
    resets[3, 0] = True

    def loss():
        out, _, _ = lstm.forward(xs, h0, c0, resets)
        return float(np.sum(w * out))

    _, _, cache = lstm.forward(xs, h0, c0, resets)
    grads, dxs, (dh0, dc0) = lstm.backward(cache, w)
    assert N.finite_difference_check(loss, lstm.params, grads, rng, samples_per_array=20) < 1e-4
    assert N.finite_difference_check(loss, [xs], [dxs], rng, samples_per_array=30) < 1e-4
    assert N.finite_difference_check(loss, h0 + c0, dh0 + dc0, rng) < 1e-4


def test_full_width_lstm_gradient(hexapod):
    spec = N.architecture(hexapod, clock_dim=2)["memory"]
    rng = np.random.default_rng(3)
    lstm = N.Lstm(spec, rng)
    xs = rng.normal(size=(3, 2, spec.input_dim))
    w = rng.normal(size=(3, 2, spec.output_dim))
    _, _, cache = lstm.forward(xs)
    grads, _, _ = lstm.backward(cache, w)
    loss = lambda: float(np.sum(w * lstm.forward(xs)[0]))  # noqa: E731
    assert N.finite_difference_check(loss, lstm.params, grads, rng, samples_per_array=6) < 1e-4


def test_adam_zero_gradient_and_first_step():
    p = [np.array([1.0, -2.0, 3.0])]
    opt = N.Adam(p, lr=0.1)
    opt.step([np.zeros(3)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0, 3.0])
    p = [np.zeros(3)]
    opt = N.Adam(p, lr=0.01)
    opt.step([np.array([0.5, -3.0, 1e-3])])
    np.testing.assert_allclose(p[0], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_quadratic_bowl():
    rng = np.random.default_rng(0)
    target = rng.normal(size=5)
    p = [np.zeros(5)]
    opt = N.Adam(p, lr=0.05)
    for _ in range(500):
        opt.step([2 * (p[0] - target)])
        opt.lr *= 0.985
    assert np.sum((p[0] - target) ** 2) < 1e-6


def test_adam_skips_nonfinite(caplog):
    p = [np.ones(2)]
    opt = N.Adam(p)
    assert not opt.step([np.array([np.nan, 1.0])])
    assert opt.skipped == 1 and opt.t == 0 and np.all(p[0] == 1)
    with pytest.raises(ValueError):
        opt.step([np.ones(3)])


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out = N.clip_grad_norm(g, 1.0)
    assert N.global_norm(out) == pytest.approx(1.0)
    assert N.clip_grad_norm(g, 10.0) is g


def test_checkpoint_round_trip(tmp_path, hexapod):
    rng = np.random.default_rng(0)
    spec = N.architecture(hexapod)
    nets = {"actor": N.Mlp(spec["stage1_actor"], rng), "mem": N.Lstm(N.LstmSpec(5, (4, 3)), rng)}
    extra = {"log_std": np.full(18, -0.5), "scalar": np.array(2.5)}
    path = tmp_path / "a.ckpt"
    N.save_checkpoint(path, nets, extra)
    back, arrays = N.load_checkpoint(path, expected={"actor": spec["stage1_actor"]})
    for name, net in nets.items():
        for p, q in zip(net.params, back[name].params):
            np.testing.assert_array_equal(p.astype(np.float32), q.astype(np.float32))
    np.testing.assert_array_equal(arrays["log_std"], extra["log_std"])
    assert float(arrays["scalar"]) == 2.5
    x = rng.normal(size=(3, spec["stage1_actor"].input_dim))
    np.testing.assert_allclose(back["actor"](x), nets["actor"](x), rtol=1e-5, atol=1e-5)


def test_checkpoint_rejects_corruption(tmp_path, hexapod):
    spec = N.architecture(hexapod)
    path = tmp_path / "a.ckpt"
    N.save_checkpoint(path, {"actor": N.Mlp(spec["stage1_actor"])})
    data = path.read_bytes()
    bad = tmp_path / "b.ckpt"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError, match="magic"):
        N.load_checkpoint(bad)
    bad.write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        N.load_checkpoint(bad)
    bad.write_bytes(data + b"\0\0\0\0")
    with pytest.raises(ValueError, match="trailing"):
        N.load_checkpoint(bad)
    with pytest.raises(ValueError, match="mismatch"):
        N.load_checkpoint(path, expected={"actor": spec["stage1_critic"]})
    with pytest.raises(ValueError, match="missing"):
        N.load_checkpoint(path, expected={"critic": spec["stage1_critic"]})
