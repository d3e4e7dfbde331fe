import pytest

from pneutilt.config import (ASSERTIONS, OUTPUT_DIR_ENV, SCENARIOS, RunConfig, load_config,
                             parse_config)
from pneutilt.errors import ConfigError


def test_empty_document_gives_defaults():
    cfg = parse_config("", env={})
    assert cfg == RunConfig()
    assert cfg.scenarios == SCENARIOS
    assert cfg.assertions == tuple(ASSERTIONS)
    assert cfg.stiffness.ramp == 2.0


def test_sections_override_fields():
    text = """
seed: 11
ffvi:
  p_agr: 7.5
  correction_scale: 0.002
gain_law: {a: -50.0, b: 400.0}
step:
  phases: [[1, 2], [3, 4]]
geometry:
  anchor_radius: 90
"""
    cfg = parse_config(text, env={})
    assert cfg.seed == 11 and cfg.p_agr == 7.5
    assert cfg.ffvi.correction_scale == 0.002
    assert cfg.gain_law.a == -50.0 and cfg.gain_law.cap == 350.0
    assert cfg.step.phases == ((1.0, 2.0), (3.0, 4.0))
    assert cfg.geometry.anchor_radius == 90.0
    assert cfg.plant_params().geometry.neutral_length == pytest.approx(120.0)


@pytest.mark.parametrize("text, line, msg", [
    ("seed: 1\nffvi:\n  p_agr: 9\n  bogus: 2\n", 4, "unknown key"),
    ("seed: 1\nseed: 2\n", 2, "duplicate"),
    ("loop:\n  dt: fast\n", 2, "dt"),
    ("nonsense: 1\n", 1, "unknown key"),
    ("scenarios: [step, flight]\n", 1, "flight"),
    ("step:\n  phases: [[1, 2, 3]]\n", 2, "pair"),
    ("geometry:\n  tilt_limits: [[1, 2], [-1, 1]]\n", 1, "tilt"),
    ("ffvi:\n  form: other\n", 1, "form"),
])
def test_errors_carry_line_numbers(text, line, msg):
    with pytest.raises(ConfigError, match=msg) as exc:
        parse_config(text, env={})
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_syntax_error_has_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("seed: 1\nffvi: [1, 2\n", env={})
    assert exc.value.line is not None


def test_boolean_and_integer_types_are_strict():
    with pytest.raises(ConfigError):
        parse_config("seed: 1.5\n", env={})
    with pytest.raises(ConfigError):
        parse_config("ffvi:\n  i_enabled: 3\n", env={})
    assert parse_config("ffvi:\n  max_correction: 5\n", env={}).ffvi.max_correction == 5.0


def test_output_dir_environment_override():
    assert parse_config("output_dir: a\n", env={OUTPUT_DIR_ENV: "b"}).output_dir == "b"
    assert parse_config("output_dir: a\n", env={}).output_dir == "a"


def test_load_config_prefixes_path(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1\nextra: 2\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path, env={})
    assert str(path) in str(exc.value) and exc.value.line == 2
    assert load_config(None, env={}) == RunConfig()
