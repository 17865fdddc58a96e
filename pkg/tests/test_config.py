import json

import pytest

from facetwin.config import StructuredLog, load_config, parse_ratios, read_log


def test_defaults_match_solver_constants():
    cfg = load_config(None, {})
    s = cfg.solver_config()
    assert (s.omega_c, s.omega_r, s.lambda_delta, s.lambda_f, s.lambda_q, s.iterations) == (25, 10, 4, 5, 5, 5)
    assert cfg.sampling.m == 5 and cfg.texture.resolution == 2048
    assert parse_ratios(cfg.sampling.ratios) == {"asian": 0.65, "white": 0.30, "black": 0.05}


def test_file_then_environment_precedence(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[solver]\nomega_c = 30\niterations = 7\n[camera]\nswap_principal_point = yes\n")
    cfg = load_config(path, {"FACETWIN_SOLVER_OMEGA_C": "40", "UNRELATED": "x"})
    assert cfg.solver.omega_c == 40.0 and cfg.solver.iterations == 7
    assert cfg.camera.swap_principal_point is True


def test_ini_round_trip(tmp_path):
    cfg = load_config(None, {"FACETWIN_EVALUATION_RADII": "70,80", "FACETWIN_OUTPUT_SEED": "9"})
    (tmp_path / "c.ini").write_text(cfg.to_ini())
    back = load_config(tmp_path / "c.ini", {})
    assert back == cfg


@pytest.mark.parametrize("text,match", [
    ("[solver]\nomega_c = -1\n", "non-negative"),
    ("[solver]\nnope = 1\n", "unknown key"),
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[solver]\niterations = many\n", "cannot read"),
])
def test_bad_config_rejected(tmp_path, text, match):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ValueError, match=match):
        load_config(path, {})


def test_check_paths(tmp_path):
    cfg = load_config(None, {})
    with pytest.raises(FileNotFoundError, match="unset"):
        cfg.check_paths("template")
    (tmp_path / "t.obj").write_text("")
    cfg.paths.template = str(tmp_path / "t.obj")
    cfg.check_paths("template")


def test_parse_ratios_forms():
    assert parse_ratios("0.5,0.3,0.2") == {"asian": 0.5, "white": 0.3, "black": 0.2}
    assert parse_ratios("white:1") == {"white": 1.0}
    for bad in ("0.5,0.5", "asian:-1", "asian:0,white:0"):
        with pytest.raises(ValueError):
            parse_ratios(bad)


def test_structured_log_is_append_only(tmp_path):
    path = tmp_path / "run.log"
    StructuredLog(path).write("a", x=1)
    StructuredLog(path).write("b", y=[1, 2])
    lines = path.read_text().splitlines()
    assert json.loads(lines[0]) == {"schema": "facetwin-log", "version": 1}
    assert read_log(path) == [{"event": "a", "x": 1}, {"event": "b", "y": [1, 2]}]
    path.write_text('{"schema": "other"}\n')
    with pytest.raises(ValueError):
        read_log(path)
