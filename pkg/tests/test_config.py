import pytest

from lapp.config import ConfigError, RunConfig, dump_config, load_config, parse_config, save_config


def test_empty_config_gives_defaults():
    assert parse_config("") == RunConfig()


def test_round_trip(tmp_path):
    cfg = parse_config(
        """
seed: 5
env: {kind: point_mass, drag: 1.0}
loop: {window: full_process, update_interval: 5, pairs_per_epoch: 4, dataset_size: 40}
annotator: {behaviour: bounding, weights: {sync_error: -2}, llm: {samples: 3}}
ppo: {hidden: [32, 32], beta: 2}
"""
    )
    assert cfg.env.drag == 1.0 and cfg.ppo.beta == 2.0 and isinstance(cfg.ppo.beta, float)
    assert cfg.annotator.weights == {"sync_error": -2.0} and cfg.annotator.llm["samples"] == 3
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize(
    "text,pattern",
    [
        ("loop:\n  epoch: 5\n", r"unknown key 'loop.epoch' \(line 2\)"),
        ("seed: 1\nfoo: 2\n", r"unknown key 'foo' \(line 2\)"),
        ("ppo:\n  lr: fast\n", r"'ppo.lr' \(line 2\) expects float, got str"),
        ("loop:\n  num_envs: 2.5\n", r"expects int"),
        ("ppo:\n  standardize_pref_reward: 1\n", r"expects bool"),
        ("annotator:\n  weights:\n    speed: 1\n", r"'annotator.weights.speed' \(line 3\)"),
        ("annotator:\n  llm:\n    sample: 3\n", r"'annotator.llm.sample'"),
        ("loop:\n  window: everything\n", r"section 'loop' \(line 1\)"),
        ("version: 2\n", r"version 2"),
        ("[1, 2]", r"mapping"),
        ("loop: [1\n", r"invalid YAML"),
    ],
)
def test_errors_name_the_key(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")
