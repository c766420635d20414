import pytest

from config import (FilterConfig, MatchConfig, SynthConfig, TrainConfig, build_config,
                    load_config_file)
from errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / 'c.cfg'
    path.write_text(text, encoding='utf-8')
    return path


def test_values_are_coerced(tmp_path):
    values = load_config_file(write(tmp_path, (
        "total_iterations = 300  # 注释\n"
        "\n"
        "number_control = no\n"
        "count_cap_initial = none\n"
        "background = 1, 0.5, 0\n"
        "sigma = 0.3\n")))
    train = build_config(TrainConfig, values, seed=5)
    assert train.total_iterations == 300
    assert train.number_control is False
    assert train.count_cap_initial is None
    assert train.background == (1.0, 0.5, 0.0)
    assert train.seed == 5
    assert build_config(FilterConfig, values).sigma == 0.3


def test_explicit_none_override_keeps_file_value(tmp_path):
    values = load_config_file(write(tmp_path, "seed = 9\n"))
    assert build_config(SynthConfig, values, seed=None).seed == 9


def test_unknown_key_names_line(tmp_path):
    with pytest.raises(ConfigError, match='第 2 行'):
        load_config_file(write(tmp_path, "seed = 1\nmystery = 2\n"))


def test_missing_equals(tmp_path):
    with pytest.raises(ConfigError, match='第 1 行'):
        load_config_file(write(tmp_path, "seed 1\n"))


def test_bad_value_names_line(tmp_path):
    values = load_config_file(write(tmp_path, "# x\ntotal_iterations = many\n"))
    with pytest.raises(ConfigError, match='第 2 行'):
        build_config(TrainConfig, values)


@pytest.mark.parametrize('cls, kwargs', [
    (TrainConfig, dict(validation_interval=0)),
    (TrainConfig, dict(validation_interval=200, densify_until=100)),
    (TrainConfig, dict(loss_dssim_weight=1.0)),
    (FilterConfig, dict(theta=1.0)),
    (FilterConfig, dict(warp_depth='metric')),
    (FilterConfig, dict(max_rotation_parallax=-1.0)),
    (MatchConfig, dict(ratio=1.5)),
    (MatchConfig, dict(max_distance=0.0)),
    (SynthConfig, dict(corrupt_fraction=1.5)),
    (SynthConfig, dict(n_train=0)),
])
def test_invalid_configs(cls, kwargs):
    with pytest.raises(ConfigError):
        cls(**kwargs)
