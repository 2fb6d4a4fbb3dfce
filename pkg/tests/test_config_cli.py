import json

import pytest

from twostage import cli
from twostage import config as C
from twostage import rewards as rw


def test_defaults_validate():
    cfg = C.from_dict({})
    assert (cfg.robot, cfg.stage, cfg.reward_mode, cfg.num_envs, cfg.iterations) == ("hexapod", "I", "BR+GR", 64, 500)
    assert cfg.scales() == rw.TABLE_SCALES


def test_sections_are_flattened(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('seeds = [1, 2]\n[ppo]\ngamma = 0.9\n[stage2]\ngp_coef = 5.0\n'
                    '[reward_scales]\nswing_force = 2.0\n')
    cfg = C.load_config(path)
    assert cfg.seeds == [1, 2] and cfg.gamma == 0.9 and cfg.gp_coef == 5.0
    assert cfg.scales()["swing_force"] == 2.0


@pytest.mark.parametrize("data", [
    {"robot": "biped"},
    {"stage": "III"},
    {"stage": "I", "reward_mode": "BR"},
    {"stage": "II", "reward_mode": "BR+ER"},
    {"stage": "record"},
    {"stage": "distill"},
    {"num_envs": 0},
    {"seeds": []},
    {"gamma": 1.5},
    {"style_scales": [-1.0]},
    {"reward_scales": {"nonsense": 1.0}},
    {"no_such_key": 1},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(C.ConfigError):
        C.from_dict(data)


@pytest.mark.parametrize("data", [
    {"reward_scales": {"lin_vel_tracking": 2.0}},
    {"control_dt": 0.01},
    {"max_episode_steps": 500},
    {"robot": "quadruped"},
    {"stage": "II", "reward_mode": "BR+ER", "dataset": "x.bin", "style_scales": [0.5, 1.0]},
])
def test_repro_mode_locks_table_constants(data):
    C.from_dict(data)  # fine without the lock
    with pytest.raises(C.ConfigError):
        C.from_dict({**data, "paper_repro": True})


def test_repro_mode_accepts_table_values():
    cfg = C.from_dict({"paper_repro": True, "reward_scales": {"raibert": 10.0}})
    assert cfg.scales() == rw.TABLE_SCALES


def test_unreadable_config_is_config_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("num_envs = [")
    with pytest.raises(C.ConfigError):
        C.load_config(bad)
    with pytest.raises(C.ConfigError):
        C.load_config(tmp_path / "missing.toml")


def test_cli_exit_code_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('reward_mode = "BR"\n')
    assert cli.main(["train-stage1", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    path = tmp_path / "c.toml"
    path.write_text("[reward_scales]\nraibert = 3.0\n")
    assert cli.main(["train-stage1", "--config", str(path), "--paper-repro"]) == cli.EXIT_CONFIG
    assert cli.main(["plot", str(tmp_path / "missing.jsonl")]) == cli.EXIT_CONFIG


def test_cli_exit_code_runtime_error(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text(f'stage1_checkpoint = "{tmp_path / "missing.ckpt"}"\n')
    code = cli.main(["record-experience", "--config", str(path), "--out", str(tmp_path)])
    assert code == cli.EXIT_RUNTIME
    assert "error" in capsys.readouterr().err


def test_cli_inspect_dataset(tmp_path, capsys):
    import numpy as np

    from twostage import amp

    path = tmp_path / "d.bin"
    amp.save_dataset(amp.ExperienceDataset(np.random.default_rng(0).normal(size=(480, 42))), path)
    assert cli.main(["inspect-dataset", str(path)]) == cli.EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert (info["count"], info["transitions"], info["width"]) == (480, 479, 42)
    assert info["duration"] == pytest.approx(9.6)


def test_subcommands_present():
    parser = cli.build_parser()
    for name in ("train-stage1", "record-experience", "train-stage2", "distill", "eval", "plot",
                 "inspect-dataset"):
        assert parser.parse_args([name, "x"] if name in ("plot", "inspect-dataset") else [name]).command == name
