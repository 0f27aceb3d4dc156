import pytest

from stackelberg_heat.config import DEFAULTS, build_problem, load_config, parse_config
from stackelberg_heat.errors import ConfigError

from conftest import DESK, make_config


def test_defaults_filled():
    cfg = parse_config({})
    assert cfg["time"]["T"] == DEFAULTS["time"]["T"]
    assert cfg["output"]["formats"] == ["csv", "json"]


def test_hash_stable_and_sensitive():
    a = parse_config({"time": {"M": 8}})
    b = parse_config({"time": {"M": 8}})
    c = parse_config({"time": {"M": 9}})
    assert a.hash == b.hash != c.hash


@pytest.mark.parametrize(
    "user",
    [
        {"bogus": {}},
        {"time": {"dt": 1}},
        {"time": {"T": -1.0}},
        {"time": {"M": 2.5}},
        {"time": {"theta": 0.3}},
        {"geometry": {"kind": "sphere"}},
        {"followers": {"mu1": 0}},
        {"hum": {"solver": "lbfgs"}},
        {"hum": {"sweep": [1e-3, -1.0]}},
        {"nash": {"method": "gmres"}},
        {"carleman": {"lambda": 0.5}},
        {"carleman": {"seed": -1}},
        {"carleman": {"scale_s": "yes"}},
        {"nonlinearity": {"LF": -0.1}},
        {"output": {"formats": ["xml"]}},
        {"coefficients": {"a": True}},
    ],
)
def test_invalid_settings_rejected(user):
    with pytest.raises(ConfigError):
        parse_config(user)


def test_overrides_revalidate():
    cfg = parse_config({})
    assert cfg.with_overrides(time={"M": 12})["time"]["M"] == 12
    with pytest.raises(ConfigError):
        cfg.with_overrides(time={"M": 0})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[time\nT = 1")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_load_shipped_configs():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.toml")):
        load_config(path)


def test_observation_set_must_lie_in_overlap():
    regions = dict(DESK["regions"], omega_prime=[0.1, 0.3])
    with pytest.raises(ConfigError, match="omega_prime"):
        build_problem(make_config(DESK, regions=regions))


def test_bad_expression_rejected():
    with pytest.raises(ConfigError):
        build_problem(make_config(DESK, leader={"y0": "x +"}))
