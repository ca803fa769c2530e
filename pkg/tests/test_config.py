import json

import pytest

from nlclab.config import (
    NONRELATIVISTIC_FRACTION,
    ExperimentConfig,
    RunSettings,
    load_config,
    parse_config,
    resolve_seed,
)
from nlclab.errors import ConfigError, OutputError
from tests.helpers import OMEGA, tilted_config


def _parse(data):
    return parse_config(json.dumps(data))


def _violations(data):
    with pytest.raises(ConfigError) as excinfo:
        _parse(data)
    return excinfo.value.violations


def test_minimal_config_gets_defaults():
    cfg = _parse(tilted_config())

    assert isinstance(cfg, ExperimentConfig)
    assert cfg.seed == 0 and cfg.steps == 2000 and cfg.l_max == 10_000
    assert cfg.erased is False and cfg.extra_measurements == []
    assert cfg.t0 == 1.0
    schedule = cfg.field_schedule()
    assert schedule.t_start == 0.0 and schedule.t_end == 1.0
    assert schedule.max_field() == 0.0


def test_config_builds_context_and_anomaly_params():
    cfg = _parse(tilted_config(gamma_s=0.02))

    ctx = cfg.lagrangian_context()
    assert ctx.n == 2 and ctx.omega == OMEGA
    p = cfg.anomaly_params()
    assert (p.gamma_s, p.t0, p.delta_t, p.omega) == (0.02, 1.0, 1e-3, OMEGA)


def test_time_ordering_is_checked():
    data = tilted_config()
    data["measurement"]["time"] = 0.0

    violations = _violations(data)

    assert any("time ordering" in v for v in violations)


def test_non_relativistic_gate_names_the_bound():
    data = tilted_config(schedule=[{"t_start": 0.0, "t_end": 1.0, "b_start": [4000.0, 0.0, 0.0]}])

    violations = _violations(data)

    gate = [v for v in violations if "non-relativistic gate" in v]
    assert gate and f"{NONRELATIVISTIC_FRACTION:g}*omega" in gate[0]


def test_all_semantic_violations_are_reported_together():
    data = tilted_config()
    data["measurement"]["time"] = 0.0
    data["measurement"]["axis"] = [0.0, 0.0, 0.0]
    data["preparation"]["outcome"] = 5

    violations = _violations(data)

    assert len(violations) == 3
    assert any("measurement.axis" in v for v in violations)
    assert any("preparation.outcome=5" in v for v in violations)


def test_field_errors_carry_their_location():
    data = tilted_config(spin_n=1, bogus=True)

    violations = _violations(data)

    assert any(v.startswith("spin_n:") for v in violations)
    assert any(v.startswith("bogus:") for v in violations)


def test_field_and_semantic_errors_are_reported_together():
    data = tilted_config(spin_n=1)
    data["preparation"]["time"] = 2.0
    data["measurement"]["axis"] = [0.0, 0.0, 0.0]

    violations = _violations(data)

    assert any(v.startswith("spin_n:") for v in violations)
    assert any("time ordering" in v for v in violations)
    assert any("measurement.axis" in v for v in violations)
    # The outcome range check depends on the broken spin_n and is skipped.
    assert not any("preparation.outcome" in v for v in violations)


def test_semantic_checks_skip_sections_that_failed():
    data = tilted_config()
    data["preparation"]["outcome"] = -1
    data["measurement"]["time"] = -5.0

    violations = _violations(data)

    assert any(v.startswith("preparation.outcome:") for v in violations)
    assert not any("time ordering" in v for v in violations)


def test_schedule_problems():
    short = tilted_config(schedule=[{"t_start": 0.0, "t_end": 0.5, "b_start": [0.0, 0.0, 1.0]}])
    assert any("schedule coverage" in v for v in _violations(short))

    gap = tilted_config(
        schedule=[
            {"t_start": 0.0, "t_end": 0.4, "b_start": [0.0, 0.0, 1.0]},
            {"t_start": 0.5, "t_end": 1.0, "b_start": [0.0, 0.0, 1.0]},
        ]
    )
    assert any(v.startswith("schedule:") for v in _violations(gap))


def test_anomaly_window_must_match_the_experiment():
    data = tilted_config()
    data["anomaly"]["t0"] = 0.5
    assert any("anomaly.t0" in v for v in _violations(data))


def test_slow_rest_oscillation_is_rejected():
    assert any("omega*t0" in v for v in _violations(tilted_config(omega=100.0)))


def test_extra_measurements_must_follow_in_time():
    data = tilted_config(
        erased=True,
        extra_measurements=[{"time": 0.5, "axis": [1.0, 0.0, 0.0], "delta_t": 1e-3}],
    )
    assert any("extra_measurements[0]" in v for v in _violations(data))


def test_syntax_errors_report_line_and_column():
    with pytest.raises(ConfigError) as excinfo:
        parse_config('{"spin_n": 2,\n  oops}')

    err = excinfo.value
    assert err.line == 2 and err.column is not None
    assert err.violations[0].startswith("syntax error")
    assert err.exit_code == 2


def test_config_must_be_an_object():
    with pytest.raises(ConfigError):
        parse_config("[1, 2, 3]")


def test_load_config(write_config, tmp_path):
    cfg = load_config(write_config(tilted_config(seed=9)))
    assert cfg.seed == 9

    with pytest.raises(OutputError) as excinfo:
        load_config(tmp_path / "missing.json")
    assert excinfo.value.exit_code == 4


def test_run_settings_read_environment(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("QLAG_SEED", "77")
    monkeypatch.setenv("QLAG_WORKERS", "3")

    settings = RunSettings()

    assert settings.seed == 77
    assert settings.workers == 3
    assert settings.log_level == "INFO"


def test_seed_precedence(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("QLAG_SEED", raising=False)
    bare = RunSettings()
    env = RunSettings(seed=5)

    assert resolve_seed(1, env, 9) == 1
    assert resolve_seed(None, env, 9) == 5
    assert resolve_seed(None, bare, 9) == 9
    assert resolve_seed(None, bare) == 0
