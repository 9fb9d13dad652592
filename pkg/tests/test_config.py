import pytest

from agvsched.config import (ConfigError, ScenarioConfig, channel_from_dict, config_kind,
                             get_dotted, load_yaml, parse_override, scenario_from_dict, set_dotted,
                             sweep_from_dict, with_value)

BAD_FIELDS = [
    ("agvs", 0), ("capacity", 0), ("sensing_range", -1), ("mode", "telepathy"),
    ("slot_cap", 0), ("seeds", []),
    ("grid.width", 0), ("grid.height", 0),
    ("channel.C", 0), ("channel.S", 0), ("channel.D", 0), ("channel.sigma", 1.0),
    ("channel.sigma", -0.5), ("channel.traffic", "cbr"),
    ("tasks.lines", 0), ("tasks.per_line", 0), ("tasks.waves", 0), ("tasks.wave_interval", -1),
    ("tasks.slack_factor", 0), ("tasks.soft_delay", -1), ("tasks.qty", [9, 3]),
    ("tasks.proc", [-1, 4]),
    ("router.kappa", 0), ("router.penalty", 0), ("router.horizon", 0),
    ("router.max_expansions", 0),
    ("sa.t_init", 0), ("sa.t_stop", 0), ("sa.alpha", 1.0), ("sa.alpha", 0),
    ("sa.destroy_size", 0), ("sa.removal_bias", -1), ("sa.max_iterations", -1),
    ("sa.repair_noise", 1.0),
    ("control.patience", 0), ("control.safety_hold", -1), ("control.collision_stall", -1),
    ("control.staleness_cap", -1),
]


@pytest.mark.parametrize("key,value", BAD_FIELDS)
def test_out_of_range_names_the_field(key, value):
    with pytest.raises(ConfigError) as err:
        scenario_from_dict(set_dotted({}, key, value))
    assert str(err.value).startswith(key)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="router.kapa"):
        scenario_from_dict({"router": {"kapa": 3}})


def test_cross_field_checks():
    with pytest.raises(ConfigError, match="S must not exceed C"):
        scenario_from_dict({"channel": {"C": 2, "S": 3}})
    with pytest.raises(ConfigError, match="capacity"):
        scenario_from_dict({"capacity": 5})


def test_defaults():
    c = ScenarioConfig()
    assert (c.grid.width, c.grid.height, c.agvs, c.capacity) == (10, 10, 10, 20)
    assert (c.channel.C, c.channel.S, c.channel.D) == (60, 2, 2)
    assert c.router.kappa == 3 and c.sa.alpha == 0.995
    assert c.tasks.qty == (5, 10) and c.tasks.proc == (5, 10)


def test_overrides_parse_yaml_values():
    assert parse_override("channel.sigma=0.1") == ("channel.sigma", 0.1)
    assert parse_override("seeds=[1, 2]") == ("seeds", [1, 2])
    c = scenario_from_dict({}, ["agvs=7", "mode=local_only"])
    assert c.agvs == 7 and c.mode == "local_only"
    with pytest.raises(ConfigError):
        parse_override("agvs")
    with pytest.raises(ConfigError):
        parse_override("=3")


def test_dotted_helpers():
    d = {"a": {"b": 1}}
    e = set_dotted(d, "a.c.d", 2)
    assert d == {"a": {"b": 1}} and get_dotted(e, "a.c.d") == 2
    with pytest.raises(KeyError):
        get_dotted(d, "a.x")
    with pytest.raises(ConfigError):
        set_dotted(d, "a.b.c", 1)


def test_with_value_validates():
    c = with_value(ScenarioConfig(), "channel.D", 25)
    assert c.channel.D == 25
    with pytest.raises(ConfigError):
        with_value(c, "channel.D", 0)


def test_sweep_spec():
    s = sweep_from_dict({"axis": "agvs", "values": [2, 4], "base": {"seeds": [3, 4]},
                         "variants": [{"name": "a", "set": {"mode": "local_only"}}]},
                        ["replications=4", "channel.D=5"])
    assert s.seeds() == [3, 4, 5, 6]
    assert s.base.channel.D == 5
    with pytest.raises(ConfigError, match="agvz"):
        sweep_from_dict({"axis": "agvz", "values": [1]})
    with pytest.raises(ConfigError, match="unique"):
        sweep_from_dict({"axis": "agvs", "values": [1],
                         "variants": [{"name": "a"}, {"name": "a"}]})


def test_channel_spec_points_skip_s_above_c():
    spec = channel_from_dict({"kind": "channel", "K": [1, 2], "C": [1, 4], "S": [1, 2],
                              "D": [2]})
    assert (1, 1, 2, 2) not in spec.points()
    assert len(spec.points()) == 2 * (1 + 2)
    with pytest.raises(ConfigError, match="K"):
        channel_from_dict({"kind": "channel", "K": [0], "C": [1], "S": [1], "D": [1]})


def test_config_kind():
    assert config_kind({"kind": "channel"}) == "channel"
    assert config_kind({"axis": "agvs"}) == "sweep"
    assert config_kind({"agvs": 3}) == "scenario"


def test_load_yaml_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("agvs: [1,\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_yaml(bad)
    lst = tmp_path / "list.yaml"
    lst.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_yaml(lst)
    with pytest.raises(ConfigError, match="cannot read"):
        load_yaml(tmp_path / "missing.yaml")
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_yaml(empty) == {}
