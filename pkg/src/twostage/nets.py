"""Small numpy network library: MLP and stacked LSTM with reverse-mode gradients.

Parameters live in plain lists of arrays so one Adam instance can drive any
mix of networks. Float64 is used for gradient checks, float32 for training.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("elu", "tanh", "identity")


# ----------------------------------------------------------------------------
# activations: value, first and second derivative given pre-activation z


def _act(name, z):
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "tanh":
        return np.tanh(z)
    return z


def _dact(name, z, u):
    if name == "elu":
        return np.where(z > 0, 1.0, u + 1.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - u * u
    return np.ones_like(z)


def _ddact(name, z, u):
    if name == "elu":
        return np.where(z > 0, 0.0, u + 1.0).astype(z.dtype)
    if name == "tanh":
        return -2.0 * u * (1.0 - u * u)
    return np.zeros_like(z)


def elu(x):
    return _act("elu", np.asarray(x, dtype=float))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ----------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple
    output_dim: int
    activation: str = "elu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"layer widths must be positive: {self}")
        if self.activation not in ACTIVATIONS or self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation in {self}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]


@dataclass(frozen=True)
class LstmSpec:
    input_dim: int
    hidden: tuple = (256, 256, 256)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or not self.hidden or any(h <= 0 for h in self.hidden):
            raise ValueError(f"layer widths must be positive: {self}")

    @property
    def output_dim(self) -> int:
        return self.hidden[-1]


def architecture(model, clock_dim: int = 0, command_dim: int = 3, scan_dim: int = 187,
                 terrain_latent: int = 16, priv_latent: int = 8) -> dict:
    """Specs of every network in both stages for ``model``.

    ``clock_dim`` extra inputs (gait clock) are appended to the
    proprioceptive block wherever it is consumed by a policy.
    """
    o_p = model.proprio_dim
    priv = model.privileged_dim
    act = model.action_dim
    policy_in = o_p + command_dim + clock_dim
    latent = terrain_latent + priv_latent
    return {
        "stage1_actor": MlpSpec(policy_in, (128, 128, 64), act),
        "stage1_critic": MlpSpec(policy_in, (128, 256, 128), 1),
        "low_level": MlpSpec(latent + policy_in, (256, 128, 64), act, output_activation="tanh"),
        "stage2_critic": MlpSpec(policy_in + scan_dim + priv, (512, 256, 128), 1),
        "priv_encoder": MlpSpec(priv, (64, 32), priv_latent),
        "terrain_encoder": MlpSpec(scan_dim, (256, 128), terrain_latent),
        "memory": LstmSpec(o_p + clock_dim, (256, 256, 256)),
        "memory_head": MlpSpec(256, (256, 128), latent),
        "discriminator": MlpSpec(2 * model.amp_dim, (1024, 512), 1),
    }


def orthogonal(rng: np.random.Generator, shape, gain: float = 1.0):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


# ----------------------------------------------------------------------------
# MLP


class Mlp:
    """Fully connected net; ``params`` alternates weights (in, out) and biases."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None, dtype=np.float64,
                 output_gain: float = 1.0, params: list | None = None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        if params is not None:
            self.params = [np.array(p, dtype=self.dtype) for p in params]
            self._check_params()
            return
        rng = rng or np.random.default_rng(0)
        widths = spec.widths
        self.params = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            gain = output_gain if last else np.sqrt(2.0)
            self.params.append(np.ascontiguousarray(orthogonal(rng, (a, b), gain), dtype=self.dtype))
            self.params.append(np.zeros(b, dtype=self.dtype))

    def _check_params(self):
        widths = self.spec.widths
        shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            shapes += [(a, b), (b,)]
        got = [p.shape for p in self.params]
        if got != shapes:
            raise ValueError(f"parameter shapes {got} do not match spec {shapes}")

    @property
    def num_layers(self) -> int:
        return len(self.params) // 2

    def copy(self) -> "Mlp":
        return Mlp(self.spec, dtype=self.dtype, params=[p.copy() for p in self.params])

    def astype(self, dtype) -> "Mlp":
        return Mlp(self.spec, dtype=dtype, params=self.params)

    def _layer_act(self, i):
        return self.spec.output_activation if i == self.num_layers - 1 else self.spec.activation

    def forward(self, x):
        """Returns ``(output, cache)``; ``x`` is (..., input_dim)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"input shape {x.shape} does not match input_dim {self.spec.input_dim}")
        us, zs = [x], []
        u = x
        for i in range(self.num_layers):
            z = u @ self.params[2 * i] + self.params[2 * i + 1]
            u = _act(self._layer_act(i), z)
            zs.append(z)
            us.append(u)
        return u, (us, zs)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Reverse pass. Returns ``(param_grads, input_grad)``."""
        us, zs = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.shape != us[-1].shape:
            raise ValueError(f"output gradient shape {g.shape} does not match cached output {us[-1].shape}")
        grads = [None] * len(self.params)
        for i in reversed(range(self.num_layers)):
            gz = g * _dact(self._layer_act(i), zs[i], us[i + 1])
            u_in = us[i].reshape(-1, us[i].shape[-1])
            grads[2 * i] = u_in.T @ gz.reshape(-1, gz.shape[-1])
            grads[2 * i + 1] = gz.reshape(-1, gz.shape[-1]).sum(0)
            g = gz @ self.params[2 * i].T
        return grads, g

    def input_gradient(self, x):
        """d(sum of outputs)/dx for a scalar-output net, with the cache reused by the penalty."""
        y, (us, zs) = self.forward(x)
        if self.spec.output_dim != 1:
            raise ValueError("input gradient defined for scalar-output networks only")
        delta = np.ones_like(zs[-1]) * _dact(self._layer_act(self.num_layers - 1), zs[-1], us[-1])
        deltas = [None] * self.num_layers
        deltas[-1] = delta
        for i in reversed(range(self.num_layers)):
            e = deltas[i] @ self.params[2 * i].T
            if i == 0:
                return y, e, (us, zs, deltas)
            deltas[i - 1] = e * _dact(self._layer_act(i - 1), zs[i - 1], us[i])

    def input_grad_penalty(self, x, coef: float):
        """``coef/2 * mean ||dD/dx||^2`` over the batch and its parameter gradients.

        Obtained by reversing the input-gradient computation (double
        backprop): the backward graph contributes weight gradients
        directly and, through the activation curvature, a pre-activation
        gradient that is pushed through an ordinary forward-graph backprop.
        Returns ``(penalty, grads, outputs, input_grads)``.
        """
        if self.spec.output_activation != "identity":
            raise ValueError("gradient penalty implemented for linear-output networks")
        y, gx, (us, zs, deltas) = self.input_gradient(x)
        x = us[0]
        batch = x.shape[0]
        penalty = 0.5 * coef * np.sum(gx * gx) / batch
        n = self.num_layers
        grads = [np.zeros_like(p) for p in self.params]
        z_bar = [np.zeros_like(z) for z in zs]
        e_bar = coef * gx / batch  # gradient w.r.t. e_0 = gx
        for i in range(n):
            W = self.params[2 * i]
            # e_{i} = delta_i W_i^T
            grads[2 * i] += e_bar.T @ deltas[i]
            d_bar = e_bar @ W
            if i == n - 1:
                break  # output delta is constant for a linear head
            act = self._layer_act(i)
            e_next = deltas[i + 1] @ self.params[2 * (i + 1)].T
            e_bar = d_bar * _dact(act, zs[i], us[i + 1])
            z_bar[i] += d_bar * e_next * _ddact(act, zs[i], us[i + 1])
        # forward-graph backprop of the injected pre-activation gradients
        gz = z_bar[n - 1]
        for i in reversed(range(n)):
            grads[2 * i] += us[i].T @ gz
            grads[2 * i + 1] += gz.sum(0)
            if i == 0:
                break
            gu = gz @ self.params[2 * i].T
            gz = z_bar[i - 1] + gu * _dact(self._layer_act(i - 1), zs[i - 1], us[i])
        return penalty, grads, y, gx


# ----------------------------------------------------------------------------
# LSTM


class Lstm:
    """Stacked LSTM; per layer ``[W_x (in, 4H), W_h (H, 4H), b (4H)]`` with gates i, f, g, o."""

    def __init__(self, spec: LstmSpec, rng: np.random.Generator | None = None, dtype=np.float64,
                 params: list | None = None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        if params is not None:
            self.params = [np.array(p, dtype=self.dtype) for p in params]
            got = [p.shape for p in self.params]
            if got != self._shapes():
                raise ValueError(f"parameter shapes {got} do not match spec {self._shapes()}")
            return
        rng = rng or np.random.default_rng(0)
        self.params = []
        d_in = spec.input_dim
        for H in spec.hidden:
            wx = np.concatenate([orthogonal(rng, (d_in, H)) for _ in range(4)], axis=1)
            wh = np.concatenate([orthogonal(rng, (H, H)) for _ in range(4)], axis=1)
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0  # forget gate starts open
            self.params += [wx.astype(self.dtype), wh.astype(self.dtype), b.astype(self.dtype)]
            d_in = H

    def _shapes(self):
        shapes, d_in = [], self.spec.input_dim
        for H in self.spec.hidden:
            shapes += [(d_in, 4 * H), (H, 4 * H), (4 * H,)]
            d_in = H
        return shapes

    def copy(self) -> "Lstm":
        return Lstm(self.spec, dtype=self.dtype, params=[p.copy() for p in self.params])

    def initial_state(self, batch: int):
        h = [np.zeros((batch, H), dtype=self.dtype) for H in self.spec.hidden]
        return h, [x.copy() for x in h]

    def forward(self, xs, h0=None, c0=None, resets=None):
        """Run a (T, B, in) sequence.

        ``resets[t]`` zeroes the recurrent state of the flagged rows before
        step t is processed. Returns ``(outputs (T, B, H), (h_T, c_T), cache)``.
        """
        xs = np.asarray(xs, dtype=self.dtype)
        if xs.ndim != 3 or xs.shape[-1] != self.spec.input_dim:
            raise ValueError(f"input shape {xs.shape} does not match (T, B, {self.spec.input_dim})")
        T, B, _ = xs.shape
        if h0 is None:
            h0, c0 = self.initial_state(B)
        for k, H in enumerate(self.spec.hidden):
            if h0[k].shape != (B, H) or c0[k].shape != (B, H):
                raise ValueError(f"layer {k} state shape {h0[k].shape} does not match ({B}, {H})")
        keep = np.ones((T, B, 1), dtype=self.dtype)
        if resets is not None:
            keep = (~np.asarray(resets, bool)).astype(self.dtype).reshape(T, B, 1)
        h = [a.copy() for a in h0]
        c = [a.copy() for a in c0]
        steps = []
        outputs = np.empty((T, B, self.spec.output_dim), dtype=self.dtype)
        for t in range(T):
            inp = xs[t]
            layers = []
            for k, H in enumerate(self.spec.hidden):
                wx, wh, b = self.params[3 * k:3 * k + 3]
                hp = h[k] * keep[t]
                cp = c[k] * keep[t]
                a = inp @ wx + hp @ wh + b
                i_g = _sigmoid(a[:, :H])
                f_g = _sigmoid(a[:, H:2 * H])
                g_g = np.tanh(a[:, 2 * H:3 * H])
                o_g = _sigmoid(a[:, 3 * H:])
                c_new = f_g * cp + i_g * g_g
                tc = np.tanh(c_new)
                h_new = o_g * tc
                layers.append((inp, hp, cp, i_g, f_g, g_g, o_g, tc))
                h[k], c[k] = h_new, c_new
                inp = h_new
            outputs[t] = inp
            steps.append(layers)
        return outputs, (h, c), (steps, keep)

    def step(self, x, h, c):
        """One time step for a (B, in) batch; returns ``(m_t, h_t, c_t)``."""
        out, (h1, c1), _ = self.forward(np.asarray(x)[None], h, c)
        return out[0], h1, c1

    def backward(self, cache, d_out, d_hT=None, d_cT=None):
        """BPTT. Returns ``(param_grads, input_grads, (d_h0, d_c0))``."""
        steps, keep = cache
        T = len(steps)
        d_out = np.asarray(d_out, dtype=self.dtype)
        B = d_out.shape[1]
        grads = [np.zeros_like(p) for p in self.params]
        dh = [np.zeros((B, H), dtype=self.dtype) for H in self.spec.hidden] if d_hT is None \
            else [a.copy() for a in d_hT]
        dc = [np.zeros((B, H), dtype=self.dtype) for H in self.spec.hidden] if d_cT is None \
            else [a.copy() for a in d_cT]
        dxs = np.empty((T, B, self.spec.input_dim), dtype=self.dtype)
        nl = len(self.spec.hidden)
        for t in reversed(range(T)):
            d_inp = d_out[t]
            for k in reversed(range(nl)):
                H = self.spec.hidden[k]
                wx, wh, _ = self.params[3 * k:3 * k + 3]
                inp, hp, cp, i_g, f_g, g_g, o_g, tc = steps[t][k]
                dh_k = dh[k] + d_inp
                do = dh_k * tc
                dcn = dc[k] + dh_k * o_g * (1.0 - tc * tc)
                di = dcn * g_g
                dg = dcn * i_g
                df = dcn * cp
                da = np.concatenate([di * i_g * (1 - i_g), df * f_g * (1 - f_g),
                                     dg * (1 - g_g * g_g), do * o_g * (1 - o_g)], axis=1)
                grads[3 * k] += inp.T @ da
                grads[3 * k + 1] += hp.T @ da
                grads[3 * k + 2] += da.sum(0)
                dh[k] = (da @ wh.T) * keep[t]
                dc[k] = dcn * f_g * keep[t]
                d_inp = da @ wx.T
            dxs[t] = d_inp
        return grads, dxs, (dh, dc)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    params: list
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    t: int = 0
    skipped: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> bool:
        """Update ``params`` in place. Non-finite gradients skip the update and return False."""
        if len(grads) != len(self.params):
            raise ValueError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("adam: non-finite gradient, update skipped (%d so far)", self.skipped)
            return False
        if self.max_grad_norm is not None:
            grads = clip_grad_norm(grads, self.max_grad_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return True


def adam_step(state: Adam, grads) -> bool:
    return state.step(grads)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grad_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


# ----------------------------------------------------------------------------
# finite differences


def finite_difference_check(loss_fn, params, grads, rng: np.random.Generator | None = None,
                            h: float = 1e-5, samples_per_array: int = 12, floor: float = 1e-8):
    """Largest relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn()`` is re-evaluated after perturbing entries of ``params`` in
    place. At most ``samples_per_array`` entries of each array are probed.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        gflat = np.asarray(g).reshape(-1)
        k = min(samples_per_array, p.size)
        for flat_idx in rng.choice(p.size, size=k, replace=False):
            # index the array itself; reshape(-1) copies non-contiguous arrays
            idx = np.unravel_index(flat_idx, p.shape)
            old = p[idx]
            p[idx] = old + h
            fp = loss_fn()
            p[idx] = old - h
            fm = loss_fn()
            p[idx] = old
            num = (fp - fm) / (2 * h)
            err = abs(num - gflat[flat_idx]) / max(abs(num), abs(gflat[flat_idx]), floor)
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"TSNN"
CHECKPOINT_VERSION = 1


def spec_description(net) -> dict:
    kind = "lstm" if isinstance(net, Lstm) else "mlp"
    d = asdict(net.spec)
    d["hidden"] = list(d["hidden"])
    return {"kind": kind, **d}


def save_checkpoint(path, nets: dict, extra: dict | None = None) -> None:
    """Write named networks (and extra raw arrays) to a versioned float32 file."""
    blocks, header = [], {"nets": {}, "arrays": {}}
    for name, net in nets.items():
        header["nets"][name] = {"spec": spec_description(net),
                                "shapes": [list(p.shape) for p in net.params]}
        blocks += net.params
    for name, arr in (extra or {}).items():
        arr = np.asarray(arr)
        header["arrays"][name] = list(arr.shape)
        blocks.append(arr)
    # block order follows the header, so keep insertion order
    meta = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(meta)) + meta)
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path, expected: dict | None = None, dtype=np.float64):
    """Read a checkpoint. Returns ``(nets, arrays)``.

    ``expected`` maps names to networks or specs; any mismatch with the
    stored spec is rejected.
    """
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint (bad magic)")
    version, n_meta = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + n_meta].decode())
    offset = 12 + n_meta

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated parameter data")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape).astype(dtype)
        offset = end
        return arr

    nets = {}
    for name, entry in header["nets"].items():
        spec_d = dict(entry["spec"])
        kind = spec_d.pop("kind")
        spec = (LstmSpec if kind == "lstm" else MlpSpec)(**spec_d)
        params = [take(tuple(s)) for s in entry["shapes"]]
        nets[name] = (Lstm if kind == "lstm" else Mlp)(spec, dtype=dtype, params=params)
    arrays = {name: take(tuple(s)) for name, s in header["arrays"].items()}
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    for name, want in (expected or {}).items():
        want_spec = getattr(want, "spec", want)
        if name not in nets:
            raise ValueError(f"{path}: network {name!r} missing")
        if nets[name].spec != want_spec:
            raise ValueError(f"{path}: spec mismatch for {name!r}: {nets[name].spec} != {want_spec}")
    return nets, arrays
