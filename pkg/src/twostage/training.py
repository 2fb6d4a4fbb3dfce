"""Pipeline stages: gait learning, experience recording, rough-terrain training, distillation."""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import amp
from . import dynamics as dyn
from . import nets
from . import ppo
from .config import RunConfig
from .distill import Student, dagger_collect, distill_update, init_student_from_teacher
from .env import EnvConfig, LocomotionEnv
from .policies import Critic, GaussianPolicy, MlpActor, ObsNormalizer, TeacherActor, mlp_actor, teacher_actor
from .rewards import RewardConfig

# per joint of a leg (hip yaw, hip pitch, knee); a wide hip swing lets the tripod stride
STAGE1_ACTION_SCALE = (0.4, 0.3, 0.3)
STAGE2_ACTION_SCALE = 0.5
STAGE1_KEYS = ("proprio", "command", "clock")


class RunLog:
    """Append-only JSONL log; wall-clock fields are omitted in deterministic mode."""

    def __init__(self, path, deterministic: bool):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.deterministic = deterministic
        self._t0 = time.time()

    def write(self, record: dict) -> None:
        rec = dict(record)
        if not self.deterministic:
            rec["wall_time"] = round(time.time() - self._t0, 3)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(round(float(x), 10))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _ppo_config(cfg: RunConfig) -> ppo.PpoConfig:
    return ppo.PpoConfig(num_envs=cfg.num_envs, steps_per_iteration=cfg.steps_per_iteration,
                         clip_ratio=cfg.clip_ratio, epochs=cfg.epochs, minibatches=cfg.minibatches,
                         gamma=cfg.gamma, lam=cfg.lam, entropy_coef=cfg.entropy_coef,
                         max_episode_steps=cfg.max_episode_steps, learning_rate=cfg.learning_rate,
                         desired_kl=cfg.desired_kl)


def _sim(cfg: RunConfig) -> dyn.SimConfig:
    return dyn.SimConfig(control_dt=cfg.control_dt)


def _action_scale(value, default):
    if value is None:
        return default
    return tuple(value) if isinstance(value, (list, tuple)) else float(value)


def _reward_cfg(cfg: RunConfig, model, style_scale: float = 1.0) -> RewardConfig:
    scales = cfg.scales()
    scales["style"] = scales["style"] * style_scale
    return RewardConfig.for_model(model, scales=scales, dt=cfg.control_dt)


# ----------------------------------------------------------------------------
# stage I


def stage1_env(cfg: RunConfig, model, seed: int, num_envs: int | None = None) -> LocomotionEnv:
    ecfg = EnvConfig(stage="I", reward_mode="BR+GR", num_envs=num_envs or cfg.num_envs,
                     max_episode_steps=cfg.max_episode_steps,
                     action_scale=_action_scale(cfg.action_scale, STAGE1_ACTION_SCALE), clock=True,
                     randomize=False, curriculum=False, sim=_sim(cfg))
    env = LocomotionEnv(model, ecfg, seed)
    env.reward_cfg = _reward_cfg(cfg, model)
    return env


def trace_record(env, step: int, stage: str) -> dict:
    """Commanded and achieved velocity and per-foot contact force of env 0."""
    st = env.state
    return {"record": "trace", "stage": stage, "step": step,
            "command": env.commands[0].tolist(),
            "velocity": [*st.body_linear_velocity[0, :2].tolist(), float(st.body_angular_velocity[0, 2])],
            "foot_forces": np.linalg.norm(st.foot_contact_forces[0], axis=-1).tolist()}


def evaluate_policy(policy, env, normalizer, steps: int, stage: str = "I"):
    """Mean-action rollout; returns mean raw reward terms, gait adherence and an env-0 trace."""
    from .rewards import gait_adherence

    sums, adherence, trace = {}, [], []
    for i in range(steps):
        obs = normalizer(env.observe()) if normalizer is not None else env.observe()
        mean = np.asarray(policy.mean(obs), dtype=float)
        _, _, _, info = env.step(mean)
        for k, v in info["terms"].items():
            sums[k] = sums.get(k, 0.0) + float(np.mean(v))
        adherence.append(gait_adherence(info["contacts"], info["desired_contact"]))
        trace.append(trace_record(env, i, stage))
    out = {f"eval/{k}": v / steps for k, v in sums.items()}
    out["eval/adherence"] = float(np.mean(np.asarray(adherence) > 0.8))
    return out, trace


def run_stage1(cfg: RunConfig, seed: int, out_dir) -> dict:
    """Train the flat-terrain gait policy; returns final metrics and the checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = dyn.builtin_model(cfg.robot)
    runlog = RunLog(cfg.log or out_dir / "stage1.jsonl", cfg.deterministic)
    runlog.write({"record": "config", "stage": "I", "seed": seed, "config": cfg.to_dict()})
    env = stage1_env(cfg, model, seed)
    rng = np.random.default_rng([seed, 1])
    specs = nets.architecture(model, clock_dim=2)
    policy = GaussianPolicy(mlp_actor(specs["stage1_actor"], STAGE1_KEYS, rng), model.action_dim)
    critic = Critic(nets.Mlp(specs["stage1_critic"], rng, dtype=np.float32), STAGE1_KEYS)
    norm = ObsNormalizer({"proprio": model.proprio_dim, "command": 3, "clock": 2})
    pcfg = _ppo_config(cfg)
    popt = nets.Adam(policy.params, lr=cfg.learning_rate, max_grad_norm=pcfg.max_grad_norm)
    copt = nets.Adam(critic.params, lr=cfg.learning_rate, max_grad_norm=pcfg.max_grad_norm)
    ckpt = out_dir / "stage1.ckpt"
    for it in range(cfg.iterations):
        buf = ppo.collect_rollout(policy, critic, env, cfg.steps_per_iteration, rng, norm, cfg.gamma)
        stats = ppo.ppo_update(policy, critic, buf, pcfg, popt, copt, rng)
        runlog.write({"record": "iteration", "stage": "I", "seed": seed, "iteration": it,
                      **buf.stats, **stats})
        if (it + 1) % cfg.checkpoint_every == 0 or it == cfg.iterations - 1:
            save_stage1(ckpt, policy, critic, norm)
    eval_env = stage1_env(cfg, model, seed + 10_000)
    norm.frozen = True
    final, trace = evaluate_policy(policy, eval_env, norm, cfg.eval_steps)
    for rec in trace:
        runlog.write(rec)
    runlog.write({"record": "eval", "stage": "I", "seed": seed, **final})
    return {"checkpoint": str(ckpt), **final}


def save_stage1(path, policy: GaussianPolicy, critic: Critic, norm: ObsNormalizer) -> None:
    nets.save_checkpoint(path, {"actor": policy.actor.net, "critic": critic.net},
                         {"log_std": policy.log_std, **norm.state_arrays()})


def load_stage1(path, dtype=np.float32):
    loaded, arrays = nets.load_checkpoint(path, dtype=dtype)
    policy = GaussianPolicy(MlpActor(loaded["actor"], STAGE1_KEYS), loaded["actor"].spec.output_dim)
    policy.log_std = arrays["log_std"].astype(dtype)
    norm = ObsNormalizer.from_arrays(arrays)
    norm.frozen = True
    return policy, Critic(loaded["critic"], STAGE1_KEYS), norm


# ----------------------------------------------------------------------------
# experience recording


def run_record(cfg: RunConfig, seed: int, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = dyn.builtin_model(cfg.robot)
    policy, _, norm = load_stage1(cfg.stage1_checkpoint)
    env = stage1_env(cfg, model, seed, num_envs=1)
    dataset = amp.record_experience(env, policy, norm)
    path = Path(cfg.dataset) if cfg.dataset else out_dir / "experience.bin"
    amp.save_dataset(dataset, path)
    runlog = RunLog(cfg.log or out_dir / "record.jsonl", cfg.deterministic)
    info = {"record": "dataset", "stage": "record", "seed": seed, "path": str(path),
            "states": dataset.count, "transitions": dataset.count - 1, "width": dataset.width,
            "duration": dataset.duration, "digest": file_digest(path)}
    runlog.write(info)
    return info


# ----------------------------------------------------------------------------
# stage II


def stage2_keys(reward_mode: str):
    # the gait-reward arm keeps the clock so its gait terms are observable
    return ("proprio", "command", "clock") if reward_mode == "BR+GR" else ("proprio", "command")


def stage2_env(cfg: RunConfig, model, seed: int, reward_mode: str | None = None, style_scale: float = 1.0,
               num_envs: int | None = None, curriculum: bool | None = None) -> LocomotionEnv:
    mode = reward_mode or cfg.reward_mode
    ecfg = EnvConfig(stage="II", reward_mode=mode, num_envs=num_envs or cfg.num_envs,
                     max_episode_steps=cfg.max_episode_steps,
                     action_scale=_action_scale(cfg.action_scale, STAGE2_ACTION_SCALE), clock=mode == "BR+GR",
                     randomize=cfg.randomize, curriculum=cfg.curriculum if curriculum is None else curriculum,
                     max_init_level=cfg.max_init_level, terrain_seed=cfg.terrain_seed, sim=_sim(cfg))
    env = LocomotionEnv(model, ecfg, seed)
    env.reward_cfg = _reward_cfg(cfg, model, style_scale)
    return env


def build_teacher(model, reward_mode: str, rng, dtype=np.float32):
    keys = stage2_keys(reward_mode)
    specs = nets.architecture(model, clock_dim=2 if "clock" in keys else 0)
    actor = teacher_actor(specs, keys, rng, dtype)
    critic = Critic(nets.Mlp(specs["stage2_critic"], rng, dtype=dtype), keys + ("scan", "priv"))
    return actor, critic


def run_stage2(cfg: RunConfig, seed: int, out_dir, reward_mode: str | None = None,
               style_scale: float = 1.0) -> dict:
    """Rough-terrain training with curriculum and, for BR+ER, the synchronized discriminator."""
    mode = reward_mode or cfg.reward_mode
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = dyn.builtin_model(cfg.robot)
    dataset = None
    if mode == "BR+ER":
        if not cfg.dataset:
            raise ValueError("reward mode BR+ER needs a dataset")
        dataset = amp.load_dataset(cfg.dataset)
        if dataset.width != model.amp_dim:
            raise ValueError(f"dataset width {dataset.width} != AMP state width {model.amp_dim}")
    tag = f"{mode.replace('+', '_')}_s{seed}" + (f"_x{style_scale:g}" if mode == "BR+ER" else "")
    runlog = RunLog(cfg.log or out_dir / f"stage2_{tag}.jsonl", cfg.deterministic)
    runlog.write({"record": "config", "stage": "II", "seed": seed, "reward_mode": mode,
                  "style_scale": style_scale, "config": cfg.to_dict()})
    env = stage2_env(cfg, model, seed, mode, style_scale)
    rng = np.random.default_rng([seed, 2])
    actor, critic = build_teacher(model, mode, rng)
    policy = GaussianPolicy(actor, model.action_dim)
    dims = {"proprio": model.proprio_dim, "command": 3, "scan": 187, "priv": model.privileged_dim}
    if mode == "BR+GR":
        dims["clock"] = 2
    norm = ObsNormalizer(dims)
    pcfg = _ppo_config(cfg)
    popt = nets.Adam(policy.params, lr=cfg.learning_rate, max_grad_norm=pcfg.max_grad_norm)
    copt = nets.Adam(critic.params, lr=cfg.learning_rate, max_grad_norm=pcfg.max_grad_norm)
    disc = dopt = style_fn = None
    dcfg = amp.DiscriminatorConfig(cfg.gp_coef, cfg.disc_batch_size, cfg.disc_updates,
                                   learning_rate=cfg.disc_learning_rate)
    if dataset is not None:
        disc = nets.Mlp(nets.architecture(model)["discriminator"], rng, dtype=np.float32)
        dopt = nets.Adam(disc.params, lr=dcfg.learning_rate, max_grad_norm=pcfg.max_grad_norm)
        style_fn = amp.make_style_fn(disc, dataset, dcfg)
    ckpt = out_dir / f"teacher_{tag}.ckpt"
    for it in range(cfg.iterations):
        buf = ppo.collect_rollout(policy, critic, env, cfg.steps_per_iteration, rng, norm, cfg.gamma,
                                  style_fn=style_fn)
        stats = ppo.ppo_update(policy, critic, buf, pcfg, popt, copt, rng)
        if disc is not None:
            trans = np.concatenate([buf.amp_before, buf.amp_after], axis=-1)
            stats.update(amp.train_discriminator_step(disc, dopt, dataset, trans, dcfg, rng))
        hist = env.curriculum.histogram()
        runlog.write({"record": "iteration", "stage": "II", "seed": seed, "reward_mode": mode,
                      "iteration": it, "mean_level": float(np.mean(env.curriculum.level)),
                      "level_histogram": hist, "graduated": int(env.curriculum.graduated.sum()),
                      **buf.stats, **stats})
        if (it + 1) % cfg.checkpoint_every == 0 or it == cfg.iterations - 1:
            save_teacher(ckpt, policy, critic, norm, mode, disc)
    return {"checkpoint": str(ckpt), "reward_mode": mode, "seed": seed,
            "final_mean_level": float(np.mean(env.curriculum.level))}


def save_teacher(path, policy: GaussianPolicy, critic: Critic, norm: ObsNormalizer, mode: str,
                 disc=None) -> None:
    a = policy.actor
    net_map = {"terrain_encoder": a.terrain_encoder, "priv_encoder": a.priv_encoder,
               "low_level": a.low_level, "critic": critic.net}
    if disc is not None:
        net_map["discriminator"] = disc
    mode_code = np.array([("BR", "BR+GR", "BR+ER").index(mode)], dtype=float)
    nets.save_checkpoint(path, net_map, {"log_std": policy.log_std, "reward_mode": mode_code,
                                         **norm.state_arrays()})


def load_teacher(path, dtype=np.float32):
    loaded, arrays = nets.load_checkpoint(path, dtype=dtype)
    mode = ("BR", "BR+GR", "BR+ER")[int(arrays["reward_mode"][0])]
    keys = stage2_keys(mode)
    actor = TeacherActor(loaded["terrain_encoder"], loaded["priv_encoder"], loaded["low_level"], keys)
    policy = GaussianPolicy(actor, loaded["low_level"].spec.output_dim)
    policy.log_std = arrays["log_std"].astype(dtype)
    norm = ObsNormalizer.from_arrays(arrays)
    norm.frozen = True
    return policy, mode, norm


# ----------------------------------------------------------------------------
# distillation and evaluation


def run_distill(cfg: RunConfig, seed: int, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = dyn.builtin_model(cfg.robot)
    teacher, mode, norm = load_teacher(cfg.teacher_checkpoint)
    rng = np.random.default_rng([seed, 3])
    mem_keys = ("proprio", "clock") if mode == "BR+GR" else ("proprio",)
    spec = nets.architecture(model, clock_dim=2 if mode == "BR+GR" else 0)["memory"]
    student = init_student_from_teacher(teacher.actor, spec, rng=rng, memory_keys=mem_keys)
    # the student goes through the same curriculum as the teacher, without style reward
    env = stage2_env(cfg, model, seed, reward_mode="BR" if mode == "BR+ER" else mode)
    opt = nets.Adam(student.params, lr=cfg.learning_rate, max_grad_norm=1.0)
    runlog = RunLog(cfg.log or out_dir / "distill.jsonl", cfg.deterministic)
    runlog.write({"record": "config", "stage": "distill", "seed": seed, "config": cfg.to_dict()})
    ckpt = out_dir / "student.ckpt"
    for it in range(cfg.iterations):
        batch = dagger_collect(student, teacher.actor, env, cfg.steps_per_iteration, norm)
        stats = distill_update(student, batch, opt, cfg.distill_beta, cfg.distill_window)
        runlog.write({"record": "iteration", "stage": "distill", "seed": seed, "iteration": it,
                      "mean_level": float(np.mean(env.curriculum.level)), "dropped": batch.dropped, **stats})
        if (it + 1) % cfg.checkpoint_every == 0 or it == cfg.iterations - 1:
            save_student(ckpt, student, norm)
    return {"checkpoint": str(ckpt), **stats}


def save_student(path, student: Student, norm: ObsNormalizer) -> None:
    keys = np.array([float("clock" in student.memory_keys), float("clock" in student.low_keys)])
    nets.save_checkpoint(path, {"memory": student.memory, "memory_head": student.head,
                                "low_level": student.low_level}, {"keys": keys, **norm.state_arrays()})


def load_student(path, dtype=np.float32):
    loaded, arrays = nets.load_checkpoint(path, dtype=dtype)
    mem_clock, low_clock = arrays["keys"]
    mem_keys = ("proprio", "clock") if mem_clock else ("proprio",)
    low_keys = ("proprio", "command", "clock") if low_clock else ("proprio", "command")
    student = Student(loaded["memory"], loaded["memory_head"], loaded["low_level"], mem_keys, low_keys)
    norm = ObsNormalizer.from_arrays(arrays)
    norm.frozen = True
    return student, norm


def tracking_by_terrain(policy_fn, env, steps: int, reset_fn=None) -> dict:
    """Mean linear-velocity tracking error per terrain type over a fixed-command rollout."""
    err = np.zeros(len(env.cfg.terrain_types))
    cnt = np.zeros(len(env.cfg.terrain_types))
    for _ in range(steps):
        obs = env.observe()
        _, _, done, _ = env.step(policy_fn(obs))
        v = env.state.body_linear_velocity[:, :2]
        e = np.linalg.norm(env.commands[:, :2] - v, axis=-1)
        np.add.at(err, env.curriculum.terrain_type, e)
        np.add.at(cnt, env.curriculum.terrain_type, 1)
        if reset_fn is not None:
            reset_fn(done)
    return {t: float(err[i] / max(cnt[i], 1)) for i, t in enumerate(env.cfg.terrain_types)}


def run_eval(cfg: RunConfig, seed: int, out_dir) -> dict:
    """Per-terrain tracking error of the teacher and, when given, the student."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = dyn.builtin_model(cfg.robot)
    teacher, mode, tnorm = load_teacher(cfg.teacher_checkpoint)
    result = {"record": "eval", "stage": "eval", "seed": seed}
    env = stage2_env(cfg, model, seed, reward_mode="BR" if mode == "BR+ER" else mode, curriculum=False)
    result["teacher"] = tracking_by_terrain(lambda o: teacher.mean(tnorm(o)).astype(float), env, cfg.eval_steps)
    if cfg.student_checkpoint:
        student, snorm = load_student(cfg.student_checkpoint)
        env = stage2_env(cfg, model, seed, reward_mode="BR" if mode == "BR+ER" else mode, curriculum=False)
        student.reset_state(env.n)
        pending = {"r": np.zeros(env.n, bool)}

        def act(o):
            a, _ = student.act(snorm(o), pending["r"])
            return a.astype(float)

        def on_done(done):
            pending["r"] = done.copy()

        result["student"] = tracking_by_terrain(act, env, cfg.eval_steps, on_done)
    RunLog(cfg.log or out_dir / "eval.jsonl", cfg.deterministic).write(result)
    return result


def inspect_dataset(path) -> dict:
    ds = amp.load_dataset(path)
    return {"path": str(path), "width": ds.width, "count": ds.count, "transitions": ds.count - 1,
            "rate": ds.rate, "duration": ds.duration, "mean": ds.mean.tolist(), "std": ds.std.tolist(),
            "digest": file_digest(path)}


__all__ = ["run_stage1", "run_record", "run_stage2", "run_distill", "run_eval", "inspect_dataset",
           "RunLog"]
