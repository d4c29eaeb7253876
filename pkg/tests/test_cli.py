import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from higt.cli import main
from higt.graph import load, validate
from higt.tiles import LEVELS, load_raster_dir, save_raster_dir, tile_pyramid

TINY_CONFIG = """\
feature_dim: 16
hidden_dim: 8
attn_dim: 4
num_blocks: 2
epochs: 1
batch_size: 4
folds: 2
repeats: 1
lr: 0.005
"""


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def graph_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("graphs")
    assert run("synth", "--out", out, "--slides", 8, "--seed", 0, "--grid", 2, "--patch-size", 8,
               "--feature-dim", 16) == 0
    return out


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(TINY_CONFIG)
    return path


class TestSynth:
    def test_four_graphs_balanced(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--slides", 4, "--classes", 2, "--seed", 0,
                   "--grid", 2, "--patch-size", 8) == 0
        assert len(list(tmp_path.glob("*.hg1"))) == 4
        rows = (tmp_path / "labels.csv").read_text().splitlines()
        assert rows[0] == "slide_id,label"
        assert sorted(r.split(",")[1] for r in rows[1:]) == ["0", "0", "1", "1"]
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["command"] == "synth" and manifest["seed"] == 0
        for p in tmp_path.glob("*.hg1"):
            assert validate(load(p)) == []

    def test_deterministic_checksums(self, tmp_path):
        for d in ("a", "b"):
            assert run("synth", "--out", tmp_path / d, "--slides", 3, "--seed", 4, "--grid", 2,
                       "--patch-size", 8) == 0
        files = sorted(p.name for p in (tmp_path / "a").glob("*.hg1"))
        assert files and all(sha(tmp_path / "a" / f) == sha(tmp_path / "b" / f) for f in files)

    def test_zero_classes_is_usage_error(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path, "--slides", 4, "--classes", 0) == 2
        assert "usage" in capsys.readouterr().err

    def test_rasters(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--slides", 2, "--rasters", "--grid", 2,
                   "--patch-size", 8) == 0
        dirs = sorted(p for p in tmp_path.iterdir() if p.is_dir())
        assert len(dirs) == 2
        assert set(load_raster_dir(dirs[0])) == set(LEVELS)


@pytest.fixture
def raster_dir(tmp_path):
    src = tmp_path / "rasters"
    assert run("synth", "--out", src, "--slides", 2, "--rasters", "--grid", 2, "--patch-size", 8) == 0
    return src


def blank_slide(path):
    save_raster_dir({"thumbnail": np.full((8, 8), 235), "region": np.full((16, 16), 235),
                     "patch": np.full((32, 32), 235)}, path)


class TestBuildGraph:
    def test_builtin(self, raster_dir, tmp_path):
        out = tmp_path / "g"
        assert run("build-graph", "--slides", raster_dir, "--out", out, "--patch-size", 8,
                   "--feature-dim", 16) == 0
        graphs = sorted(out.glob("*.hg1"))
        assert len(graphs) == 2
        for p in graphs:
            g = load(p)
            assert validate(g) == [] and g.feature_dim == 16 and g.label in (0, 1)
        assert (out / "manifest.json").exists()

    def test_precomputed_wrong_dim_isolated(self, raster_dir, tmp_path):
        feats = tmp_path / "feats"
        feats.mkdir()
        slides = sorted(p for p in raster_dir.iterdir() if p.is_dir())
        for i, d in enumerate(slides):
            grids = tile_pyramid(load_raster_dir(d), 8)
            coords = [(LEVELS.index(lv), t.row, t.col) for lv, g in grids.items() for t in g.tiles]
            dim = 16 if i == 0 else 12
            np.savez(feats / f"{d.name}.npz", coords=np.array(coords),
                     features=np.random.default_rng(i).standard_normal((len(coords), dim)))
        out = tmp_path / "g"
        assert run("build-graph", "--slides", raster_dir, "--features", f"precomputed:{feats}",
                   "--out", out, "--patch-size", 8, "--feature-dim", 16) == 0
        summary = json.loads((out / "build_summary.json").read_text())
        assert [r["slide_id"] for r in summary["ok"]] == [slides[0].name]
        assert [r["slide_id"] for r in summary["failed"]] == [slides[1].name]
        assert "12 dims" in summary["failed"][0]["detail"]

    def test_background_slide_skipped(self, raster_dir, tmp_path):
        blank_slide(raster_dir / "zz_blank")
        out = tmp_path / "g"
        with pytest.warns(RuntimeWarning):
            code = run("build-graph", "--slides", raster_dir, "--out", out, "--patch-size", 8,
                       "--feature-dim", 16)
        assert code == 0
        summary = json.loads((out / "build_summary.json").read_text())
        assert [r["slide_id"] for r in summary["skipped"]] == ["zz_blank"]
        assert len(summary["ok"]) == 2

    def test_all_failed_exit_one(self, tmp_path):
        src = tmp_path / "src"
        (src / "broken").mkdir(parents=True)
        assert run("build-graph", "--slides", src, "--out", tmp_path / "g") == 1

    def test_bad_features_flag(self, raster_dir, tmp_path):
        assert run("build-graph", "--slides", raster_dir, "--features", "kimianet", "--out", tmp_path) == 2


class TestTrainEvalAblate:
    def test_train_then_eval_checkpoint(self, graph_dir, config_file, tmp_path):
        assert run("train", "--config", config_file, "--data", graph_dir, "--out", tmp_path / "t") == 0
        for name in ("model.ck1", "history.json", "config.yaml", "manifest.json"):
            assert (tmp_path / "t" / name).exists()
        assert run("eval", "--config", config_file, "--data", graph_dir, "--out", tmp_path / "e",
                   "--checkpoint", tmp_path / "t" / "model.ck1") == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert 0 <= report["auc_mean"] <= 100

    def test_eval_cross_validation_reproducible(self, graph_dir, config_file, tmp_path):
        for d in ("a", "b"):
            assert run("eval", "--config", config_file, "--data", graph_dir, "--out", tmp_path / d) == 0
        assert sha(tmp_path / "a" / "report.json") == sha(tmp_path / "b" / "report.json")
        assert len(json.loads((tmp_path / "a" / "report.json").read_text())["runs"]) == 2

    def test_ablate_bi(self, graph_dir, config_file, tmp_path, capsys):
        assert run("ablate", "--config", config_file, "--data", graph_dir, "--out", tmp_path,
                   "--ablate", "bi") == 0
        table = (tmp_path / "ablation.md").read_text().splitlines()
        assert [row.split("|")[1].strip() for row in table[2:]] == ["Ours w/o BI", "Ours"]
        full = json.loads((tmp_path / "report_full.json").read_text())
        bi = json.loads((tmp_path / "report_bi.json").read_text())
        assert full["loss_curves"] != bi["loss_curves"]
        assert "Ours w/o BI" in capsys.readouterr().out

    def test_missing_config(self, graph_dir, tmp_path):
        assert run("train", "--config", tmp_path / "nope.yaml", "--data", graph_dir, "--out", tmp_path) == 2

    def test_unknown_config_key(self, graph_dir, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("feature_dim: 16\nwidth: 3\n")
        assert run("eval", "--config", bad, "--data", graph_dir, "--out", tmp_path) == 2

    def test_empty_data_is_runtime_failure(self, config_file, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert run("eval", "--config", config_file, "--data", tmp_path / "empty", "--out", tmp_path / "o") == 1
        assert "no .hg1 graphs" in capsys.readouterr().err

    def test_dimension_mismatch_names_stage(self, graph_dir, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(TINY_CONFIG.replace("feature_dim: 16", "feature_dim: 32"))
        assert run("train", "--config", cfg, "--data", graph_dir, "--out", tmp_path / "o") == 1
        assert "[input]" in capsys.readouterr().err


class TestPlot:
    @pytest.fixture
    def reports(self, tmp_path):
        d = tmp_path / "reports"
        d.mkdir()
        for i, (label, auc) in enumerate([("Ours", 91.0), ("Ours w/o BI", 88.5)]):
            (d / f"report_{i}.json").write_text(json.dumps({
                "runs": [{"auc": auc, "acc": 80.0}], "auc_mean": auc, "auc_std": 1.5, "acc_mean": 80.0,
                "acc_std": 0.0, "config_hash": "x", "label": label, "param_count": 1000 + i,
                "loss_curves": [[0.7, 0.5, 0.4]]}))
        (d / "manifest.json").write_text(json.dumps({"peak_rss_mb": 321.0}))
        return d

    def test_deterministic_bytes(self, reports, tmp_path):
        for name in ("a.png", "b.png"):
            assert run("plot", "--reports", reports / "report_*.json", "--out", tmp_path / name) == 0
        assert sha(tmp_path / "a.png") == sha(tmp_path / "b.png")
        assert (tmp_path / "a.manifest.json").exists()

    def test_single_report(self, reports, tmp_path):
        assert run("plot", "--reports", reports / "report_0.json", "--out", tmp_path / "one.png") == 0
        assert (tmp_path / "one.png").stat().st_size > 0

    def test_malformed_report(self, reports, tmp_path, capsys):
        (reports / "report_9.json").write_text("{not json")
        assert run("plot", "--reports", reports / "report_*.json", "--out", tmp_path / "x.png") == 1
        assert "report_9.json" in capsys.readouterr().err

    def test_no_match(self, tmp_path):
        assert run("plot", "--reports", tmp_path / "*.json", "--out", tmp_path / "x.png") == 2


def test_console_entry_exit_codes(tmp_path):
    cmd = [sys.executable, "-m", "higt.cli"]
    assert subprocess.run(cmd + ["synth"], capture_output=True).returncode == 2
    assert subprocess.run(cmd + ["synth", "--out", str(tmp_path), "--slides", "1", "--grid", "1",
                                 "--patch-size", "8"], capture_output=True).returncode == 0
    assert subprocess.run(cmd + ["plot", "--reports", str(tmp_path / "none*"), "--out", "x.png"],
                          capture_output=True).returncode == 2
