"""Run configuration: TOML files with dotted sections, validation and the reproduction lock."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .rewards import TABLE_SCALES

ROBOTS = ("hexapod", "quadruped")
STAGES = ("I", "II", "distill", "eval", "record")
REWARD_MODES = ("BR", "BR+GR", "BR+ER")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    robot: str = "hexapod"
    stage: str = "I"
    reward_mode: str = "BR+GR"
    seeds: list = field(default_factory=lambda: [0])
    num_envs: int = 64
    iterations: int = 500
    steps_per_iteration: int = 48
    max_episode_steps: int = 1000
    action_scale: float | list | None = None  # scalar or per leg joint; default depends on the stage
    eval_steps: int = 500
    checkpoint_every: int = 100
    deterministic: bool = False
    paper_repro: bool = False
    # ppo
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    clip_ratio: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    gamma: float = 0.99
    lam: float = 0.95
    desired_kl: float | None = None
    # stage II
    curriculum: bool = True
    randomize: bool = True
    max_init_level: int = 0
    terrain_seed: int = 0
    style_scales: list = field(default_factory=lambda: [1.0])
    gp_coef: float = 10.0
    disc_batch_size: int = 256
    disc_updates: int = 2
    disc_learning_rate: float = 1e-3
    # distillation
    distill_beta: float = 1.0
    distill_window: int = 50
    # overrides of reward constants (forbidden in reproduction mode)
    reward_scales: dict = field(default_factory=dict)
    control_dt: float = 0.02
    # paths
    out: str = "runs"
    stage1_checkpoint: str | None = None
    dataset: str | None = None
    teacher_checkpoint: str | None = None
    student_checkpoint: str | None = None
    log: str | None = None

    def validate(self) -> "RunConfig":
        if self.robot not in ROBOTS:
            raise ConfigError(f"robot must be one of {ROBOTS}, got {self.robot!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}, got {self.reward_mode!r}")
        if self.stage == "I" and self.reward_mode != "BR+GR":
            raise ConfigError("stage I trains with gait rewards; set reward_mode = 'BR+GR'")
        if self.stage == "II" and self.reward_mode == "BR+ER" and not self.dataset:
            raise ConfigError("reward_mode BR+ER needs a dataset path")
        if self.stage == "record" and not self.stage1_checkpoint:
            raise ConfigError("recording needs stage1_checkpoint")
        if self.stage == "distill" and not self.teacher_checkpoint:
            raise ConfigError("distillation needs teacher_checkpoint")
        for name in ("num_envs", "iterations", "steps_per_iteration", "max_episode_steps", "epochs",
                     "minibatches", "disc_batch_size", "disc_updates", "distill_window"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("gamma and lam must lie in [0, 1]")
        if self.action_scale is not None:
            vals = self.action_scale if isinstance(self.action_scale, list) else [self.action_scale]
            if not vals or any(not isinstance(v, (int, float)) or v <= 0 for v in vals):
                raise ConfigError("action_scale must be a positive number or a list of them")
        if self.gp_coef < 0:
            raise ConfigError("gp_coef must be non-negative")
        if not self.style_scales or any(s < 0 for s in self.style_scales):
            raise ConfigError("style_scales must be a non-empty list of non-negative numbers")
        unknown = set(self.reward_scales) - set(TABLE_SCALES)
        if unknown:
            raise ConfigError(f"unknown reward terms in reward_scales: {sorted(unknown)}")
        if self.paper_repro:
            self._check_repro()
        return self

    def _check_repro(self):
        changed = [k for k, v in self.reward_scales.items() if v != TABLE_SCALES[k]]
        if changed:
            raise ConfigError(f"reproduction mode forbids overriding reward scales: {changed}")
        if self.control_dt != 0.02:
            raise ConfigError("reproduction mode fixes control_dt at 0.02 s")
        if self.max_episode_steps != 1000:
            raise ConfigError("reproduction mode fixes the episode cap at 1000 steps")
        if self.robot != "hexapod":
            raise ConfigError("reproduction mode uses the hexapod")
        if self.style_scales != [1.0] and self.stage == "II":
            raise ConfigError("reproduction mode fixes the style scale at 1")

    def scales(self) -> dict:
        out = dict(TABLE_SCALES)
        out.update(self.reward_scales)
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def _flatten(table: dict, prefix: str = "") -> dict:
    """Sections are only for readability: ``[ppo] gamma`` and ``ppo.gamma`` both set ``gamma``.

    ``[reward_scales]`` is kept as a table.
    """
    out = {}
    for key, value in table.items():
        if isinstance(value, dict) and key != "reward_scales":
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[key] = value
    return out


def from_dict(data: dict, **overrides) -> RunConfig:
    flat = _flatten(data)
    flat.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(flat) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = RunConfig(**flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if isinstance(cfg.seeds, int):
        cfg.seeds = [cfg.seeds]
    return cfg.validate()


def load_config(path, **overrides) -> RunConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(data, **overrides)
