import csv
import hashlib
import json
import os
from pathlib import Path

import pytest

from dlab import cli
from dlab.cli import (EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, ConfigError, load_config, main,
                      plan_jobs, validate_config, write_atomic)

TAU_CONFIG = """
kind = "dissipation-time"
[grid]
n = 16
[params]
gamma = 1.0
order = 1.0
"""

SWEEP_CONFIG = """
kind = "sweep"
[grid]
n = 32
[params]
gamma = 0.1
ms = [1, 2, 3]
As = [0.0, 2.0, 4.0]
orders = [1.0]
"""

DECAY_CONFIG = """
kind = "decay"
seed = 5
[grid]
n = 16
[flow]
kind = "cellular"
amplitude = 2.0
[params]
gamma = 0.05
T = 0.05
sample_interval = 0.01
initial = "random"
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestValidation:
    def test_negative_gamma_names_field(self, tmp_path, capsys):
        cfg = write(tmp_path, TAU_CONFIG.replace("gamma = 1.0", "gamma = -1.0"))
        assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INVALID
        assert "params.gamma" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    @pytest.mark.parametrize("raw,field", [
        ({}, "kind"),
        ({"kind": "bogus"}, "kind"),
        ({"kind": "decay", "params": {"T": 1.0, "colour": 1}}, "params.colour"),
        ({"kind": "decay", "params": {}}, "params.T"),
        ({"kind": "decay", "grid": {"n": 48}, "params": {"T": 1.0}}, "grid.n"),
        ({"kind": "decay", "flow": {"kind": "cellular", "cells": 4}, "grid": {"n": 16},
          "params": {"T": 1.0}}, "flow.cells"),
        ({"kind": "dissipation-time", "params": {"gamma": 1.0, "tol": 0.7}}, "params.tol"),
        ({"kind": "diffusivity", "params": {"paths": 1000, "batch": 300}}, "params.paths"),
        ({"kind": "nonlinear", "params": {"equation": ["PME"], "h": 1.5}}, "params.h"),
        ({"kind": "liouvillean", "params": {"schedule": "canonical", "K": 4}}, "params.K"),
        ({"kind": "decay", "seed": True, "params": {"T": 1.0}}, "seed"),
    ])
    def test_field_errors(self, raw, field):
        with pytest.raises(ConfigError) as exc:
            validate_config(raw, env={})
        assert exc.value.path == field

    def test_unreadable_and_malformed(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.toml", env={})
        with pytest.raises(ConfigError, match="TOML"):
            load_config(write(tmp_path, "kind = = 1"), env={})

    def test_validate_command(self, tmp_path, capsys):
        assert main(["validate", str(write(tmp_path, SWEEP_CONFIG))]) == EXIT_OK
        assert "9 job(s)" in capsys.readouterr().out

    def test_seed_override(self, tmp_path):
        cfg = write(tmp_path, DECAY_CONFIG)
        assert load_config(cfg, env={}).seed == 5
        assert load_config(cfg, env={"DLAB_SEED": "11"}).seed == 11
        with pytest.raises(ConfigError, match="DLAB_SEED"):
            load_config(cfg, env={"DLAB_SEED": "x"})

    def test_hash_stable_and_sensitive(self, tmp_path):
        a = load_config(write(tmp_path, DECAY_CONFIG), env={})
        b = load_config(write(tmp_path, DECAY_CONFIG, "b.toml"), env={})
        c = load_config(write(tmp_path, DECAY_CONFIG.replace("T = 0.05", "T = 0.06"), "c.toml"),
                        env={})
        assert a.config_hash() == b.config_hash() != c.config_hash()


class TestRun:
    def test_tau_summary(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["run", str(write(tmp_path, TAU_CONFIG)), "--out", str(out)]) == EXIT_OK
        line = capsys.readouterr().out.splitlines()[0]
        assert line.startswith("[ok] dissipation-time")
        tau = float(line.split("tau=")[1].split()[0])
        assert tau == pytest.approx(0.01756, rel=0.01)

    def test_sweep_files(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", str(write(tmp_path, SWEEP_CONFIG)), "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "sweep.csv")
        assert rows[0][:5] == ["m", "A", "alpha", "gamma", "tau"]
        assert len(rows) == 1 + 9
        manifest = json.loads((out / "manifest.json").read_text())
        listed = [f["path"] for f in manifest["files"]]
        assert len(listed) == 10
        assert sum(p.startswith("samples/") for p in listed) == 9
        for entry in manifest["files"]:
            data = (out / entry["path"]).read_bytes()
            assert hashlib.sha256(data).hexdigest() == entry["sha256"]

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write(tmp_path, DECAY_CONFIG)
        for d in ("a", "b"):
            assert main(["run", str(cfg), "--out", str(tmp_path / d)]) == EXIT_OK
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys()
        for name in a:
            if name != "manifest.json":
                assert a[name] == b[name], name
        ma, mb = (json.loads(x["manifest.json"]) for x in (a, b))
        for m in (ma, mb):
            m.pop("wall_clock_seconds")
        assert ma == mb

    def test_env_seed_changes_output(self, tmp_path, monkeypatch):
        cfg = write(tmp_path, DECAY_CONFIG)
        main(["run", str(cfg), "--out", str(tmp_path / "a")])
        monkeypatch.setenv("DLAB_SEED", "6")
        main(["run", str(cfg), "--out", str(tmp_path / "b")])
        ta = (tmp_path / "a" / "trajectory.csv").read_bytes()
        tb = (tmp_path / "b" / "trajectory.csv").read_bytes()
        assert ta != tb
        assert json.loads((tmp_path / "b" / "manifest.json").read_text())["config"]["seed"] == 6

    def test_csv_fixed_format(self, tmp_path):
        out = tmp_path / "o"
        main(["run", str(write(tmp_path, DECAY_CONFIG)), "--out", str(out)])
        raw = (out / "trajectory.csv").read_bytes()
        assert b"\r\n" in raw
        for row in read_csv(out / "trajectory.csv")[1:]:
            assert all(v == f"{float(v):.17g}" for v in row)

    def test_runtime_failure_exit_2(self, tmp_path, monkeypatch, capsys):
        def boom(job, n):
            raise FloatingPointError("forced")

        monkeypatch.setitem(cli._RUNNERS, "dissipation-time", boom)
        out = tmp_path / "o"
        assert main(["run", str(write(tmp_path, TAU_CONFIG)), "--out", str(out)]) == EXIT_RUNTIME
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["jobs"][0]["status"] == "failed"
        assert "forced" in manifest["jobs"][0]["error"]
        assert "[failed]" in capsys.readouterr().out

    def test_ladder_refines_until_stable(self, tmp_path):
        text = TAU_CONFIG + "[ladder]\nrefine = true\nmax_n = 64\n"
        cfg = load_config(write(tmp_path, text), env={})
        outcome = cli.execute(plan_jobs(cfg)[0])
        assert outcome["status"] == "ok"
        assert [h["n"] for h in outcome["ladder"]] == [16, 32]

    def test_workers_match_serial(self, tmp_path):
        cfg = write(tmp_path, SWEEP_CONFIG.replace("ms = [1, 2, 3]", "ms = [1]"))
        main(["run", str(cfg), "--out", str(tmp_path / "a")])
        main(["run", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"])
        assert (tmp_path / "a" / "sweep.csv").read_bytes() == \
            (tmp_path / "b" / "sweep.csv").read_bytes()

    def test_bad_workers(self, tmp_path):
        assert main(["run", str(write(tmp_path, TAU_CONFIG)), "--workers", "0"]) == EXIT_INVALID


class TestAtomic:
    def test_no_partial_file_on_failure(self, tmp_path, monkeypatch):
        target = tmp_path / "out" / "x.csv"
        write_atomic(target, b"old")

        def dying_replace(src, dst):
            raise KeyboardInterrupt

        monkeypatch.setattr(os, "replace", dying_replace)
        with pytest.raises(KeyboardInterrupt):
            write_atomic(target, b"new contents")
        assert target.read_bytes() == b"old"
        assert [p.name for p in target.parent.iterdir()] == ["x.csv"]


class TestPlot:
    @pytest.fixture(scope="class")
    @staticmethod
    def decay_run(tmp_path_factory):
        d = tmp_path_factory.mktemp("decay")
        cfg = d / "run.toml"
        cfg.write_text(DECAY_CONFIG)
        main(["run", str(cfg), "--out", str(d / "o")])
        return d / "o"

    def test_trajectory_one_series(self, decay_run):
        svg = cli.plot(decay_run / "trajectory.csv", output=decay_run / "t.svg").read_text()
        assert svg.count("<polyline") == 1
        config_hash = json.loads((decay_run / "manifest.json").read_text())["config_hash"]
        assert f"config_hash={config_hash}" in svg

    def test_suppression_two_series_and_envelope(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("time,flow,noflow,envelope\r\n0,1,1,0.5\r\n1,0.4,0.9,0.5\r\n")
        svg = cli.plot(p).read_text()
        assert svg.count("<polyline") == 3
        assert svg.count('stroke-dasharray="6 4" points=') == 1

    def test_byte_identical(self, decay_run, tmp_path):
        a = cli.plot(decay_run / "trajectory.csv", log_y=True, output=tmp_path / "a.svg")
        b = cli.plot(decay_run / "trajectory.csv", log_y=True, output=tmp_path / "b.svg")
        assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()

    def test_log_y_differs(self, decay_run, tmp_path):
        a = cli.plot(decay_run / "trajectory.csv", output=tmp_path / "a.svg").read_bytes()
        b = cli.plot(decay_run / "trajectory.csv", log_y=True, output=tmp_path / "b.svg")
        assert a != b.read_bytes() and b"log10 scale" in b.read_bytes()

    def test_unknown_schema(self, tmp_path, capsys):
        p = tmp_path / "x.csv"
        p.write_text("alpha,beta\r\n1,2\r\n")
        assert main(["plot", str(p)]) == EXIT_INVALID
        assert "unknown report schema" in capsys.readouterr().err

    def test_missing_report(self, tmp_path):
        assert main(["plot", str(tmp_path / "none.csv")]) == EXIT_INVALID

    def test_sweep_report(self, tmp_path):
        out = tmp_path / "o"
        main(["run", str(write(tmp_path, SWEEP_CONFIG.replace("ms = [1, 2, 3]", "ms = [1, 2]"))),
              "--out", str(out)])
        assert main(["plot", str(out / "sweep.csv")]) == EXIT_OK
        assert (out / "sweep.svg").read_text().count("<polyline") == 2
