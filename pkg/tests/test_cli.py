import csv

import pytest

from mfjump import cli, config
from mfjump.cli import ConfigError, main, parse_config, parse_number
from mfjump.report import read_header

SMALL = "model = example2\ndt = 2^-5\nn_paths = 200\nseed = 7\n"


@pytest.fixture(autouse=True)
def isolated_globals(monkeypatch, tmp_path):
    monkeypatch.setattr(config, "OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setattr(config, "WORKER_THREADS", 1)


def _run(tmp_path, command, text, *extra):
    cfg = tmp_path / f"{command}.cfg"
    cfg.write_text(text)
    out = tmp_path / "out"
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


# ----------------------------
# Run files
# ----------------------------

def test_defaults_from_a_model_selector():
    cfg = parse_config("model = example2")
    assert (cfg.dt, cfg.n_paths, cfg.seed, cfg.h_fd) == (2.0 ** -12, 1000, 0, 1e-3)
    assert cfg.payoff == "european_call" and cfg.K is None
    assert cfg.model_settings() == {"a": -1.0, "b": 1.0, "c": 1.0, "x0": 1.0, "T": 1.0, "nu": 0.1}


def test_numbers_and_comments():
    cfg = parse_config("# a run\nmodel = example1   # growth\na = 0.2\ndt = 2**-6\nK = 1.5e0\n")
    assert cfg.dt == 2.0 ** -6 and cfg.K == 1.5
    assert dict(cfg.model_params) == {"a": 0.2}
    assert parse_number(" 2^-3 ") == 0.125


def test_missing_model_selector():
    with pytest.raises(ConfigError, match="model selector required"):
        parse_config("")


@pytest.mark.parametrize("text, line, message", [
    ("model = example2\ndt = 0\n", 2, "dt must be positive"),
    ("model = example2\nn_paths = 10\nvolatility = 2\n", 3, "unknown key 'volatility'"),
    ("model = example2\nseed = 1.5\n", 2, "malformed value for seed"),
    ("model = example2\ndt = one\n", 2, "malformed value for dt"),
    ("model = example2\ndt = 0.3\n", 2, "does not divide"),
    ("model = example2\nseed = 1\nseed = 2\n", 3, "duplicate key 'seed'"),
    ("model = example2\npayoff = asian\n", 2, "payoff must be one of"),
    ("model = inline\na = 1\n", 2, "unknown key 'a'"),
    ("model = example9\n", 1, "unknown model"),
    ("model = example2\nmethods = malliavin,greek\n", 2, "methods must be drawn from"),
    ("model = example2\ndt = 2^5000\n", 2, "malformed value for dt"),
    ("model = example2\nquantity = malliavin_derivative\nr_time = 2\n", 3, "r_time must lie in"),
])
def test_invalid_run_files(text, line, message):
    with pytest.raises(ConfigError, match=message) as err:
        parse_config(text)
    assert err.value.line == line
    assert str(err.value).startswith(f"line {line}: ")


def test_inline_model_records_every_constant():
    cfg = parse_config("model = inline\ndrift_b1 = -1\njump_f = 0.5\nnu = 2\n")
    settings = cfg.model_settings()
    assert settings["drift_b1"] == -1.0 and settings["nu"] == 2.0 and settings["sigma0_c"] == 0.0


# ----------------------------
# Commands
# ----------------------------

def test_delta_output_is_reproducible(tmp_path):
    code, out = _run(tmp_path, "delta", SMALL)
    assert code == 0
    first = (out / config.DELTA_FILE).read_bytes()
    code, out = _run(tmp_path, "delta", SMALL, "--threads", "2")
    assert code == 0
    assert (out / config.DELTA_FILE).read_bytes() == first

    rows = _rows(out / config.DELTA_FILE)
    assert [r["method"] for r in rows] == ["malliavin", "flow_pathwise", "fd_central"]
    assert all(r["runtime_ms"] == "0" for r in rows)
    assert float(rows[0]["K"]) == pytest.approx(0.5, abs=1e-3)


def test_bad_run_file_exits_with_two(tmp_path, capsys):
    code, _ = _run(tmp_path, "delta", "model = example2\ndt = 0\n")
    assert code == 2
    assert "line 2: dt must be positive" in capsys.readouterr().err


def test_missing_run_file_exits_with_two(tmp_path):
    assert main(["delta", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_out_of_grid_jump_time_exits_with_two(tmp_path):
    text = SMALL + "quantity = malliavin_derivative\nr_time = 2\ndt_list = 2^-3, 2^-4, 2^-5\n"
    code, _ = _run(tmp_path, "converge", text)
    assert code == 2


def test_unexpected_failure_exits_with_one(tmp_path, monkeypatch, capsys):
    def broken(cmd, cfg):
        raise IndexError("step 99 outside the grid")

    monkeypatch.setattr(cli, "run_command", broken)
    code, _ = _run(tmp_path, "delta", SMALL)
    assert code == 1
    assert "IndexError: step 99 outside the grid" in capsys.readouterr().err


def test_pathwise_digital_exits_with_one(tmp_path, capsys):
    code, _ = _run(tmp_path, "delta", SMALL + "payoff = digital\nmethods = flow_pathwise\n")
    assert code == 1
    assert "pathwise method invalid for discontinuous payoff" in capsys.readouterr().err


def test_compare_puts_finite_differences_first(tmp_path):
    code, out = _run(tmp_path, "compare", SMALL + "payoff = digital\nh_fd = 0.1\n")
    assert code == 0
    rows = _rows(out / config.COMPARE_FILE)
    assert [r["method"] for r in rows] == ["fd_central", "malliavin"]
    assert [r["payoff"] for r in rows] == ["digital", "digital(ramp=0.05)"]
    assert float(rows[0]["variance_ratio"]) == 1.0
    assert float(rows[1]["variance_ratio"]) > 0.0
    assert rows[0]["runtime_ratio"] == ""


def test_converge_writes_a_fit_row(tmp_path):
    text = "model = example2\ndt = 2^-5\nn_paths = 50\nquantity = state\ndt_list = 2^-3, 2^-4, 2^-5\n"
    code, out = _run(tmp_path, "converge", text)
    assert code == 0
    rows = _rows(out / config.CONVERGE_FILE)
    assert [r["quantity"] for r in rows] == ["state"] * 3 + ["state:fit"]
    assert [float(r["dt"]) for r in rows[:3]] == [0.125, 0.0625, 0.03125]
    assert rows[-1]["slope"] != "" and rows[0]["slope"] == ""


def test_trace_header_regenerates_the_file(tmp_path):
    code, out = _run(tmp_path, "simulate", SMALL + "trace_paths = 2\n")
    assert code == 0
    first = out / config.TRACE_FILE
    original = first.read_bytes()
    rows = _rows(first)
    assert len(rows) == 2 * 33
    assert rows[0]["X"] == "1" and rows[0]["flow"] == "1"

    header = read_header(first)
    assert header.startswith("command = simulate\nmodel = example2\n")
    code, again = _run(tmp_path, "simulate", header)
    assert code == 0
    assert (again / config.TRACE_FILE).read_bytes() == original


def test_uncompensated_flag_is_recorded(tmp_path):
    code, out = _run(tmp_path, "simulate", SMALL, "--uncompensated-euler", "--seed", "3")
    assert code == 0
    header = read_header(out / config.TRACE_FILE)
    assert "compensated = false\n" in header
    assert "seed = 3\n" in header
    assert not parse_config(header).compensated


def test_unknown_command_is_a_config_error():
    with pytest.raises(ConfigError, match="unknown command"):
        cli.run_command("price", parse_config(SMALL))
