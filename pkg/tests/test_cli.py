import csv
import json
import os
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest

from dpqr import io
from dpqr.cli import ConfigError, main, read_ini, resolve

SMALL = ["--m", "2", "--seed", "7"]


def write_ini(path, text):
    path.write_text(text)
    return str(path)


def small_ini(tmp_path, extra=""):
    return write_ini(tmp_path / "run.ini", "[design]\np = 10\nN = 100\nm = 2\n" + extra)


class TestGenerate:
    def test_shape(self, tmp_path):
        cfg = small_ini(tmp_path)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        with open(tmp_path / "a" / "data.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 101 and all(len(r) == 12 for r in rows)
        assert rows[0][0] == "x0" and rows[0][-1] == "y"

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = small_ini(tmp_path)
        for sub in ("a", "b"):
            assert main(["generate", "--config", cfg, "--out", str(tmp_path / sub), "--seed", "3"]) == 0
        assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()

    def test_binary_round_trip(self, tmp_path):
        cfg = small_ini(tmp_path)
        main(["generate", "--config", cfg, "--out", str(tmp_path / "c"), "--format", "csv"])
        main(["generate", "--config", cfg, "--out", str(tmp_path / "b"), "--format", "bin"])
        a = io.read_dataset(str(tmp_path / "c" / "data.csv"))
        b = io.read_dataset(str(tmp_path / "b" / "data.bin"))
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
        assert (tmp_path / "b" / "data.bin").stat().st_size == 16 + 8 * 100 * 12

    def test_indivisible_rejected_before_generation(self, tmp_path, capsys):
        cfg = small_ini(tmp_path)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "x"), "--m", "3"]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ConfigError" and "divisible" in err["message"]
        assert not (tmp_path / "x").exists()


class TestConfig:
    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            read_ini(write_ini(tmp_path / "k.ini", "[design]\npp = 3\n"))
        with pytest.raises(ConfigError):
            read_ini(write_ini(tmp_path / "s.ini", "[extra]\np = 3\n"))

    def test_layering(self, tmp_path):
        cfg = resolve([read_ini(small_ini(tmp_path, "[privacy]\neps = 0.5\n")), {"privacy": {"eps": 0.25}}])
        assert cfg["privacy"]["eps"] == 0.25 and cfg["design"]["p"] == 10
        assert resolve([{"run": {"profile": "calibrated"}}])["estimation"]["eta"] == 1.0

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            resolve([{"design": {"p": "ten"}}])

    def test_cli_exit_code(self, tmp_path, capsys):
        bad = write_ini(tmp_path / "bad.ini", "[estimation]\nsparsity_level = 3\n")
        assert main(["estimate", "--config", bad, "--out", str(tmp_path / "o")]) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_noiseless_estimate(tmp_path, capsys):
    cfg = write_ini(tmp_path / "n.ini", "[design]\np = 10\nN = 400\nm = 2\nnoise_scale = 0\n"
                    "[estimation]\nbandwidth = 1e-5\nstep_rule = auto\n[inference]\nlocal_bandwidth = 1e-5\n")
    assert main(["estimate", "--config", cfg, "--no-dp", "--out", str(tmp_path / "o")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["l2"] < 1e-3


@pytest.mark.parametrize("cmd", ["estimate", "infer", "bootstrap"])
def test_manifest_ledger_totals_config(tmp_path, capsys, cmd):
    cfg = small_ini(tmp_path, "[bootstrap]\nn_boot = 40\n[inference]\ncoords = 1,10\n")
    out = tmp_path / cmd
    assert main([cmd, "--config", cfg, "--eps", "0.3", "--delta", "0.002", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    led = man["ledger"]
    assert led["root"]["exact"] == ["3/10", "1/500"]
    total = [Fraction(a) + Fraction(b) for a, b in zip(led["spent"]["exact"], led["unspent"]["exact"])]
    assert total == [Fraction(3, 10), Fraction(1, 500)] and led["balanced"]
    assert {"versions", "config", "seed", "outputs"} <= set(man)
    expected = {"estimate": ["estimate.csv"], "infer": ["intervals.csv", "precision.csv"],
                "bootstrap": ["simultaneous.csv", "bootstrap_nk1grad.csv"]}[cmd]
    assert all(name in man["outputs"] for name in expected)


def test_rerun_identical(tmp_path, capsys):
    cfg = small_ini(tmp_path, "[bootstrap]\nn_boot = 30\n[inference]\ncoords = 1,10\n")
    assert main(["bootstrap", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["rerun", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    for name in ("estimate.csv", "simultaneous.csv", "intervals.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_experiment_counts(tmp_path, capsys):
    cfg = small_ini(tmp_path, "[experiment]\nreplicates = 3\neps_grid = 0.5,1\n[run]\nprofile = calibrated\n")
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    with open(tmp_path / "e" / "aggregate.csv") as fh:
        agg = list(csv.DictReader(fh))
    assert [r["count"] for r in agg] == ["3", "3"]
    assert main(["rerun", str(tmp_path / "e" / "manifest.json"), "--out", str(tmp_path / "f")]) == 0


def test_estimate_from_file(tmp_path, capsys):
    cfg = small_ini(tmp_path)
    main(["generate", "--config", cfg, "--out", str(tmp_path / "g"), "--format", "bin"])
    assert main(["estimate", "--config", cfg, "--data", str(tmp_path / "g" / "data.bin"),
                 "--out", str(tmp_path / "h")]) == 0
    assert (tmp_path / "h" / "estimate.csv").exists()


def test_env_default_out_and_module_entry(tmp_path):
    cfg = small_ini(tmp_path)
    env = dict(os.environ, DPQR_OUT=str(tmp_path / "envout"))
    r = subprocess.run([sys.executable, "-m", "dpqr", "generate", "--config", cfg], env=env,
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "envout" / "data.csv").exists()
    r = subprocess.run([sys.executable, "-m", "dpqr", "estimate", "--config", cfg, "--data",
                        str(tmp_path / "missing.csv")], env=env, capture_output=True, text=True)
    assert r.returncode == 1
    assert json.loads(r.stderr)["error"] == "FileNotFoundError"
