import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualskin.config import (ConfigParseError, ConfigValidationError, ScenarioConfig,
                             dump_config, load_config, loads_config, validate)


def test_defaults_valid():
    cfg = ScenarioConfig()
    assert validate(cfg) == []
    assert cfg.markers.rings == 9 and cfg.markers.per_ring == 16 and cfg.markers.stagger
    assert cfg.tactile.mu == 1e-2
    assert cfg.material.youngs_modulus == 0.22 and cfg.material.poisson_ratio == 0.49


def test_minimal_file():
    cfg = loads_config("scenario = distance_sweep\nseed = 7\n")
    assert cfg.scenario == "distance_sweep" and cfg.seed == 7
    assert cfg.distance == ScenarioConfig().distance


def test_sections_and_lists():
    text = """
# comment
scenario = indentation_sweep
[indentation]
depths = 1, 2,3.5   # trailing comment
artifacts = no
[tactile]
variants = lsq_dual_norm, lsq_single_raw
"""
    cfg = loads_config(text)
    assert cfg.indentation.depths == (1.0, 2.0, 3.5)
    assert cfg.indentation.artifacts is False
    assert cfg.tactile.variants == ("lsq_dual_norm", "lsq_single_raw")


def test_roundtrip_default():
    cfg = ScenarioConfig()
    assert loads_config(dump_config(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 64 - 1), st.floats(1e-6, 1.0), st.integers(1, 500),
       st.lists(st.floats(0, 200, allow_nan=False), min_size=1, max_size=5))
def test_roundtrip_property(seed, mu, reps, dists):
    cfg = ScenarioConfig(seed=seed)
    cfg = cfg.replace(tactile=dataclasses.replace(cfg.tactile, mu=mu),
                      distance=dataclasses.replace(cfg.distance, repetitions=reps,
                                                   distances=tuple(dists)))
    assert loads_config(dump_config(cfg)) == cfg


def test_unknown_key_reports_line():
    with pytest.raises(ConfigParseError, match=r"f\.cfg:3: unknown key mesh\.radiuss"):
        loads_config("seed = 1\n[mesh]\nradiuss = 3\n", "f.cfg")


def test_unknown_section():
    with pytest.raises(ConfigParseError, match=r"unknown section \[laser\]"):
        loads_config("[laser]\npower = 3\n")


def test_bad_value_reports_line():
    with pytest.raises(ConfigParseError, match=r"<string>:2: .*markers\.rings"):
        loads_config("[markers]\nrings = many\n")


def test_syntax_error_line_is_shifted():
    with pytest.raises(ConfigParseError, match=r"line 2"):
        loads_config("seed = 1\nseed = 2\n")


def test_all_violations_collected():
    text = "scenario = nonsense\n[mesh]\nradius = -1\n[cycle]\ndt = 0\n"
    with pytest.raises(ConfigValidationError) as ei:
        loads_config(text)
    v = ei.value.violations
    assert any(s.startswith("scenario.scenario") for s in v)
    assert any(s.startswith("mesh.radius") for s in v)
    assert any(s.startswith("cycle.dt") for s in v)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "nope.cfg")


def test_load_file(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("seed = 16\n")
    assert load_config(p).seed == 16
