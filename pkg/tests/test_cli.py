import os
import subprocess
import sys

import numpy as np
import pytest

from gsketch.cli import EXIT_CONTRACT, EXIT_FRESHNESS, EXIT_PARSE, main
from gsketch.config import load_config
from gsketch.io import write_stream


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def column(text, name):
    lines = text.splitlines()
    idx = lines[0].split(",").index(name)
    return [line.split(",")[idx] for line in lines[1:]]


def test_example1_samples_name_row_zero(capsys):
    code, out, _ = run(capsys, "sample", "--generator", "example1", "--n", "256", "--d", "8", "--seed", "1")
    assert code == 0
    rows = column(out, "row")
    assert len(rows) == 1000
    assert rows.count("0") >= 990


def test_bench_ratio_on_example1_is_n(capsys):
    code, out, _ = run(capsys, "bench-variance", "--generator", "example1", "--n", "256", "--d", "8", "--draws", "100")
    assert code == 0
    assert float(column(out, "ratio")[0]) == pytest.approx(256)


def test_bench_covers_all_three_examples(capsys):
    code, out, _ = run(capsys, "bench-variance", "--n", "128", "--d", "4", "--draws", "100")
    assert code == 0
    assert column(out, "generator") == ["example1", "example2", "example3"]


def test_empty_input_is_a_parse_error(tmp_path, capsys):
    path = tmp_path / "empty.csv"
    path.write_text("")
    code, out, err = run(capsys, "sample", "--input", str(path))
    assert code == EXIT_PARSE and out == "" and "empty" in err


def test_bad_flag_exits_with_parse_code(capsys):
    with pytest.raises(SystemExit) as info:
        main(["sgd", "--mode", "bogus"])
    assert info.value.code == EXIT_PARSE


def test_dimension_mismatch(capsys):
    code, _, err = run(capsys, "sample", "--n", "32", "--d", "3", "--x", "1,2")
    assert code == EXIT_CONTRACT and "coordinates" in err


def test_freshness_exhaustion_has_its_own_code(capsys):
    # every step lands in row 0's bucket, which holds fewer samplers than steps
    code, _, err = run(capsys, "sgd", "--generator", "example1", "--n", "256", "--d", "8",
                       "--T", "100", "--no-sensitivity")
    assert code == EXIT_FRESHNESS and "fresh" in err


@pytest.mark.parametrize("argv", [
    ["sample", "--generator", "gaussian", "--n", "128", "--d", "3", "--x", "0.5,-1,2", "--draws", "300"],
    ["sgd", "--generator", "lstsq", "--n", "200", "--d", "4", "--T", "20"],
    ["estimate", "--generator", "example2", "--n", "64", "--d", "4", "--x", "1,1,1,1"],
    ["hessian", "--generator", "lstsq", "--n", "100", "--d", "3", "--T", "5"],
    ["hessian", "--generator", "gaussian", "--n", "64", "--d", "3", "--T", "3", "--order", "3", "--x", "1,0,0"],
])
def test_replays_are_byte_identical(capsys, argv):
    first = run(capsys, *argv)
    second = run(capsys, *argv)
    assert first[0] == 0 and first == second


def test_seed_changes_the_draws(capsys):
    argv = ["sample", "--n", "128", "--d", "3", "--x", "1,1,1", "--draws", "200"]
    assert run(capsys, *argv, "--seed", "1")[1] != run(capsys, *argv, "--seed", "2")[1]


def test_sgd_modes(capsys):
    for mode in ("sketch", "uniform", "exact", "gd"):
        code, out, err = run(capsys, "sgd", "--generator", "lstsq", "--n", "100", "--d", "3", "--T", "10", "--mode", mode)
        assert code == 0 and "final_F=" in err
        assert out.splitlines()[0] == "step,bucket,instance,row,p_hat,w_norm,objective"


def test_estimate_reports_ratio(capsys):
    code, out, _ = run(capsys, "estimate", "--generator", "gaussian", "--n", "256", "--d", "3", "--x", "1,-1,0.5")
    ratio = float(dict(line.split(",") for line in out.splitlines()[1:])["ratio"])
    assert code == 0 and 0.5 <= ratio <= 2.0


def test_binary_input(tmp_path, capsys):
    rng = np.random.default_rng(0)
    path = tmp_path / "rows.bin"
    write_stream(path, rng.standard_normal((50, 3)), rng.standard_normal(50))
    code, out, _ = run(capsys, "sample", "--input", str(path), "--draws", "10", "--x", "1,0,0")
    assert code == 0 and len(out.splitlines()) == 11


def test_print_config_and_config_file(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("GSKETCH_SEED", raising=False)
    conf = tmp_path / "run.conf"
    conf.write_text("# experiment\nT = 7\nlambda=0.25\nmeasure=ridge\n")
    code, out, _ = run(capsys, "sgd", "--config", str(conf), "--T", "9", "--print-config")
    lines = out.splitlines()
    assert code == 0
    assert "T=9" in lines and "lam=0.25" in lines and "measure=ridge" in lines and "seed=0" in lines


def test_bad_config_file(tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("colour=blue\n")
    assert run(capsys, "sgd", "--config", str(conf))[0] == EXIT_PARSE
    assert run(capsys, "sgd", "--config", str(tmp_path / "missing.conf"))[0] == EXIT_PARSE


def test_seed_precedence():
    assert load_config(environ={"GSKETCH_SEED": "11"}).seed == 11
    assert load_config(overrides={"seed": 3}, environ={"GSKETCH_SEED": "11"}).seed == 3
    assert load_config(environ={}).seed == 0


def test_console_entry_point(tmp_path):
    out = tmp_path / "o.csv"
    env = dict(os.environ, GSKETCH_SEED="5")
    proc = subprocess.run(
        [sys.executable, "-m", "gsketch.cli", "sample", "--n", "64", "--d", "2", "--draws", "5",
         "--x", "1,1", "--out", str(out)],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0 and proc.stdout == ""
    assert out.read_text().startswith("draw,row,instance,p_hat,v_norm\n")
