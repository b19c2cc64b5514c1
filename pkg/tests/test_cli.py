import json
import os

import pytest

from fractional_qat.checkpoint import load_checkpoint, to_bytes
from fractional_qat.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from fractional_qat.config import load_config
from fractional_qat.reporting import read_csv, read_metrics_csv

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
TINY_CFG = os.path.join(CONFIGS, "tiny.cfg")


def run(*args):
    return main([str(a) for a in args])


def status(out):
    with open(os.path.join(out, "status.json")) as fh:
        return json.load(fh)


class TestTrain:
    def test_writes_artifacts(self, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--config", TINY_CFG, "--out", out) == EXIT_OK
        m = read_metrics_csv(str(out / "metrics.csv"))
        assert len(m.records) == load_config(TINY_CFG).precision_schedule().total_epochs
        assert load_checkpoint(str(out / "student.fqat")).head.weight_spec.bits == 4
        assert status(out)["status"] == "ok"
        assert set(status(out)["artifacts"]) == {"metrics.csv", "student.fqat", "resolved.cfg"}

    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run("train", "--config", TINY_CFG, "--out", a)
        run("train", "--config", TINY_CFG, "--out", b)
        for name in ("metrics.csv", "student.fqat", "resolved.cfg"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_resolved_config_reproduces(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run("train", "--config", TINY_CFG, "--out", a, "--seed", 11)
        assert run("train", "--config", a / "resolved.cfg", "--out", b) == EXIT_OK
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "resolved.cfg").read_bytes() == (b / "resolved.cfg").read_bytes()

    def test_seed_override_changes_run(self, tmp_path):
        run("train", "--config", TINY_CFG, "--out", tmp_path / "a")
        run("train", "--config", TINY_CFG, "--out", tmp_path / "b", "--seed", 99)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_static_writes_calibration(self, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text(open(TINY_CFG).read().replace("[quant]", "[quant]\nact_mode = static"))
        assert run("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        header, rows = read_csv(str(tmp_path / "o" / "calibration.csv"))
        assert len(rows) == 7 and all(r[header.index("sample_count")] == "20" for r in rows)

    def test_dry_run_computes_nothing(self, tmp_path, capsys):
        out = tmp_path / "dry"
        assert run("train", "--config", TINY_CFG, "--out", out, "--dry-run") == EXIT_OK
        assert not out.exists()
        printed = capsys.readouterr().out
        assert "[schedule]" in printed and "# command: train" in printed

    def test_abort_exit_code(self, tmp_path):
        cfg = tmp_path / "boom.cfg"
        cfg.write_text(open(TINY_CFG).read().replace("[trainer]", "[trainer]\nlearning_rate = 1e39"))
        out = tmp_path / "o"
        assert run("train", "--config", cfg, "--out", out) == EXIT_RUNTIME
        st = status(out)
        assert st["status"] == "aborted" and st["detail"]["epoch"] == 0
        assert (out / "abort.fqat").exists() and (out / "metrics.csv").exists()


class TestConfigErrors:
    def test_bad_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[trainer]\nbatch_size = 8\nbach_size = 8\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
        assert f"{cfg}:3:" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_missing_config(self, tmp_path):
        assert run("calibrate", "--config", tmp_path / "nope.cfg") == EXIT_CONFIG

    def test_bad_checkpoint(self, tmp_path):
        junk = tmp_path / "junk.fqat"
        junk.write_bytes(b"nope")
        assert run("outlier-report", "--config", TINY_CFG, "--checkpoint", junk, "--out", tmp_path) == EXIT_CONFIG

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run("fly", "--config", TINY_CFG)
        assert exc.value.code == 2


class TestSweep:
    def test_grid_rows(self, tmp_path):
        assert run("sweep-bits", "--config", TINY_CFG, "--out", tmp_path) == EXIT_OK
        header, rows = read_csv(str(tmp_path / "sweep.csv"))
        assert header == ["bits", "mean_loss"]
        assert [float(r[0]) for r in rows] == [8.0, 6.0, 4.5, 4.0]
        losses = [float(r[1]) for r in rows]
        assert losses == sorted(losses)

    def test_bits_flag(self, tmp_path):
        assert run("sweep-bits", "--config", TINY_CFG, "--out", tmp_path, "--bits", "4,5.5") == EXIT_OK
        _, rows = read_csv(str(tmp_path / "sweep.csv"))
        assert [float(r[0]) for r in rows] == [5.5, 4.0]

    def test_default_grid(self):
        assert load_config(os.path.join(CONFIGS, "sweep.cfg")).sweep["bits"] == (8, 7, 6, 5.5, 5, 4.75, 4.5, 4.25, 4)


class TestCompare:
    def test_three_curves_and_summary(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        text = open(TINY_CFG).read().replace("name = custom\nstages = [[8, 1], [6, 1], [4, 2]]", "epochs = 12")
        cfg.write_text(text + "\n[output]\nrecord_wall_time = false\n")
        assert run("compare-schedules", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        lengths = set()
        for name in ("fractional", "integer", "simple"):
            header, rows = read_csv(str(tmp_path / "o" / f"curve_{name}.csv"))
            assert header == ["epoch", "stage_bits", "seed_1", "seed_2"]
            lengths.add(len(rows))
        assert lengths == {12}
        header, rows = read_csv(str(tmp_path / "o" / "summary.csv"))
        assert header == ["schedule", "seed", "final_val_loss"] and len(rows) == 6


class TestOutlierReport:
    def test_rows_per_layer(self, tmp_path):
        assert run("outlier-report", "--config", TINY_CFG, "--out", tmp_path) == EXIT_OK
        _, rows = read_csv(str(tmp_path / "outliers_layers.csv"))
        assert len(rows) == 7
        header, tags = read_csv(str(tmp_path / "outliers_tags.csv"))
        assert [t[0] for t in tags] == ["FF", "Attn", "Other"]

    def test_constant_input(self, tmp_path):
        cfg = tmp_path / "k.cfg"
        cfg.write_text(open(TINY_CFG).read().replace("[report]", "[report]\nconstant_input = 0.5"))
        assert run("outlier-report", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
        header, rows = read_csv(str(tmp_path / "o" / "outliers_layers.csv"))
        assert all(float(r[header.index("outlier_fraction")]) == 0.0 for r in rows)

    def test_from_checkpoint(self, tmp_path):
        run("train", "--config", TINY_CFG, "--out", tmp_path / "t")
        ckpt = tmp_path / "t" / "student.fqat"
        before = ckpt.read_bytes()
        assert run("outlier-report", "--config", TINY_CFG, "--checkpoint", ckpt, "--out", tmp_path / "r") == EXIT_OK
        assert ckpt.read_bytes() == before == to_bytes(load_checkpoint(str(ckpt)))
