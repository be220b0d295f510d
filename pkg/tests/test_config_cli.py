"""Config grammar, validation, manifests, and the CLI surface."""

import os
import subprocess
import sys

import numpy as np
import pytest

from selfdistill.cli import main
from selfdistill.config import (Config, ConfigError, DEFAULTS, build_dataset, load_config,
                                parse_text, read_manifest, resolve, serialize)

MINIMAL_BLOBS = """
model.arch = mlp
model.sections = 1x16,1x16
model.num_classes = 3
model.input = 6
data.kind = gaussian_blobs
data.n_samples = 120
data.noise = 0.4
train.epochs = 3
train.batch_size = 32
train.lr = 0.05
distill.alpha = 0.3
distill.lambda = 0.01
"""


class TestGrammar:
    def test_parse_ignores_comments_and_blanks(self):
        raw = parse_text("# comment\n\na.b = 1\n  c.d = x y  \n")
        assert raw == {"a.b": "1", "c.d": "x y"}

    def test_bad_line_reports_lineno(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_text("a.b = 1\nnot a pair\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_text("a.b = 1\na.b = 2\n")

    def test_unknown_key_is_hard_error(self):
        with pytest.raises(ConfigError, match="unknown key train.optimizer"):
            resolve({"train.optimizer": "adam"})

    def test_defaults_resolve_cleanly(self):
        cfg = resolve({"data.kind": "gaussian_blobs"})
        assert cfg.plan.epochs == int(DEFAULTS["train.epochs"])

    def test_roundtrip_identity(self):
        cfg = resolve(parse_text(MINIMAL_BLOBS))
        again = resolve(parse_text(cfg.text()))
        assert again.values == cfg.values
        assert serialize(again.values) == cfg.text()

    def test_all_errors_reported_at_once(self):
        with pytest.raises(ConfigError) as err:
            resolve({"distill.alpha": "1.5", "distill.temperature": "0",
                     "train.epochs": "0", "data.kind": "gaussian_blobs"})
        text = str(err.value)
        assert "alpha" in text and "temperature" in text and "epochs" in text

    def test_alpha_bound_message(self):
        with pytest.raises(ConfigError, match=r"alpha must be in \[0,1\]"):
            resolve({"distill.alpha": "1.5", "data.kind": "gaussian_blobs"})

    def test_run_keys_ignored(self):
        cfg = resolve({"data.kind": "gaussian_blobs", "run.started_at": "sometime"})
        assert "run.started_at" not in cfg.values

    def test_sections_grammar(self):
        cfg = resolve({"model.sections": "2x8,16d,1x32d", "data.kind": "gaussian_blobs"})
        specs = cfg.sections
        assert [(s.blocks, s.channels, s.downsample) for s in specs] == \
            [(2, 8, False), (1, 16, True), (1, 32, True)]


class TestDatasetBuild:
    def test_blobs_dataset(self):
        cfg = resolve(parse_text(MINIMAL_BLOBS))
        ds = build_dataset(cfg)
        assert ds.num_classes == 3
        assert ds.train.x.shape[1] == 6

    def test_shapes_dataset_materializes_cifar_layout(self, tmp_path):
        cfg = resolve({"data.kind": "shapes", "data.path": str(tmp_path / "corpus"),
                       "data.per_class_train": "3", "data.per_class_test": "2"})
        ds = build_dataset(cfg)
        assert sorted(os.listdir(tmp_path / "corpus")) == sorted(
            [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"])
        assert len(ds.train) == 30 and len(ds.test) == 20
        # second build reuses the files byte-identically
        ds2 = build_dataset(cfg)
        assert ds2.checksum() == ds.checksum()


def run_cli(*argv):
    return main(list(argv))


class TestCli:
    def _write_cfg(self, tmp_path, text=MINIMAL_BLOBS):
        path = tmp_path / "exp.cfg"
        path.write_text(text)
        return str(path)

    def test_missing_config_exits_1(self, tmp_path, capsys):
        rc = run_cli("train", "--config", str(tmp_path / "missing.cfg"),
                     "--out", str(tmp_path / "run"))
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_invalid_override_exits_1(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        rc = run_cli("train", "--config", cfg, "--set", "distill.alpha=2.0",
                     "--out", str(tmp_path / "run"))
        assert rc == 1
        assert "alpha" in capsys.readouterr().err

    def test_existing_run_dir_refused(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        out = tmp_path / "run"
        out.mkdir()
        rc = run_cli("train", "--config", cfg, "--out", str(out))
        assert rc == 1
        assert "already exists" in capsys.readouterr().err

    def test_train_then_eval_consistency(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        out = tmp_path / "run"
        assert run_cli("train", "--config", cfg, "--out", str(out), "--quiet") == 0
        captured = capsys.readouterr().out
        assert "done:" in captured
        # manifest written with run metadata
        manifest = (out / "manifest.cfg").read_text()
        assert "run.dataset_checksum" in manifest and "run.finished_at" in manifest
        assert (out / "metrics.csv").exists() and (out / "checkpoint_final.sdck").exists()

        assert run_cli("eval", "--run", str(out), "--exit", "2") == 0
        eval_out = capsys.readouterr().out.strip().splitlines()[-1]
        eval_acc = float(eval_out.split(",")[1])
        metrics = (out / "metrics.csv").read_text().splitlines()
        last_test_exit2 = [l for l in metrics if l.startswith("3,2,test")][-1]
        assert eval_acc == pytest.approx(float(last_test_exit2.split(",")[3]), abs=1e-6)

    def test_override_recorded_in_manifest(self, tmp_path):
        cfg = self._write_cfg(tmp_path)
        out = tmp_path / "run"
        assert run_cli("train", "--config", cfg, "--set", "distill.alpha=0.25",
                       "--out", str(out), "--quiet") == 0
        resolved, meta = read_manifest(str(out / "manifest.cfg"))
        assert resolved.plan.distill.alpha == 0.25
        assert meta["run.code_version"]

    def test_manifest_rerun_reproduces_metrics_bitwise(self, tmp_path):
        cfg = self._write_cfg(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run_cli("train", "--config", cfg, "--out", str(out1), "--quiet") == 0
        assert run_cli("train", "--config", str(out1 / "manifest.cfg"),
                       "--out", str(out2), "--quiet") == 0
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "checkpoint_final.sdck").read_bytes() == \
            (out2 / "checkpoint_final.sdck").read_bytes()

    def test_flops_from_config(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        assert run_cli("flops", "--config", cfg) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "exit,macs,params,acceleration"
        assert len(out) == 3

    def test_probe_subcommands_emit_csv(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        run_dir = tmp_path / "run"
        assert run_cli("train", "--config", cfg, "--out", str(run_dir), "--quiet") == 0
        capsys.readouterr()

        noise_csv = tmp_path / "noise.csv"
        assert run_cli("probe-noise", "--run", str(run_dir),
                       "--set", "probe.sigmas=0.0,0.1", "--set", "probe.trials=2",
                       "--out", str(noise_csv)) == 0
        assert noise_csv.read_text().splitlines()[0] == "sigma,trial,accuracy,loss"
        capsys.readouterr()

        assert run_cli("grad-stats", "--run", str(run_dir)) == 0
        assert capsys.readouterr().out.splitlines()[0] == "layer,depth_index,mean_abs_grad"

        assert run_cli("separability", "--run", str(run_dir)) == 0
        assert capsys.readouterr().out.splitlines()[0] == "exit,sse,ssb,ratio,accuracy"

        assert run_cli("pca-export", "--run", str(run_dir)) == 0
        assert capsys.readouterr().out.splitlines()[0] == "sample,label,pc1,pc2"

    def test_entrypoint_runs_as_module(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "selfdistill.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
