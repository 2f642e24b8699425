import csv
import json

import pytest

from dualdis.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + a short training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main([
        "gen-data", "--outdir", str(data), "--samples-per-class", "40", "--seed", "3",
    ]) == 0
    run_dir = root / "run"
    assert main([
        "train", "--data", str(data / "manifest.csv"), "--outdir", str(run_dir),
        "--preset", "DualDis", "--epochs", "2", "--seed", "0", "--batch-size", "32",
    ]) == 0
    return root


class TestGenData:
    def test_manifest_and_images_exist(self, workspace):
        manifest = workspace / "data" / "manifest.csv"
        rows = list(csv.DictReader(open(manifest)))
        assert len(rows) == 200
        assert all((workspace / "data" / r["filename"]).exists() for r in rows[:10])
        assert {r["split"] for r in rows} == {"train", "val", "test"}


class TestTrain:
    def test_artifacts_written(self, workspace):
        run_dir = workspace / "run"
        assert (run_dir / "checkpoint.ddck").exists()
        assert (run_dir / "losses.csv").exists()
        assert (run_dir / "losses.png").exists()
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "metrics.png").exists()

    def test_run_spec_file(self, workspace, tmp_path):
        spec = tmp_path / "run.spec"
        spec.write_text(
            "preset = B'\n"
            f"data = {workspace / 'data' / 'manifest.csv'}\n"
            f"outdir = {tmp_path / 'out'}\n"
            "epochs = 1\n"
            "batch_size = 32\n"
            "seed = 1\n"
        )
        assert main(["train", "--run-spec", str(spec)]) == 0
        assert (tmp_path / "out" / "checkpoint.ddck").exists()

    def test_unknown_run_spec_key_rejected(self, tmp_path):
        spec = tmp_path / "bad.spec"
        spec.write_text("presett = DualDis\n")
        with pytest.raises(SystemExit):
            main(["train", "--run-spec", str(spec)])


class TestEval:
    def test_eval_prints_row_and_writes_csv(self, workspace, tmp_path, capsys):
        out_csv = tmp_path / "report.csv"
        code = main([
            "eval", "--checkpoint", str(workspace / "run" / "checkpoint.ddck"),
            "--data", str(workspace / "data" / "manifest.csv"), "--out", str(out_csv),
        ])
        assert code == 0
        printed = capsys.readouterr().out
        assert "acc_y" in printed and "DualDis" in printed
        row = list(csv.DictReader(open(out_csv)))[0]
        assert set(row) >= {"preset", "acc_y", "acc_z", "dis_y", "dis_z", "aggregated"}


class TestEditMixAugment:
    def test_edit_sweep_figure(self, workspace, tmp_path):
        out = tmp_path / "edits"
        code = main([
            "edit", "--checkpoint", str(workspace / "run" / "checkpoint.ddck"),
            "--data", str(workspace / "data" / "manifest.csv"),
            "--outdir", str(out), "--steps", "5", "--attributes", "0,3",
        ])
        assert code == 0
        assert list(out.glob("edit_*.png"))

    def test_mix_writes_image(self, workspace, tmp_path):
        out = tmp_path / "mix.png"
        code = main([
            "mix", "--checkpoint", str(workspace / "run" / "checkpoint.ddck"),
            "--data", str(workspace / "data" / "manifest.csv"),
            "--identity-index", "0", "--attribute-index", "1", "--out", str(out),
        ])
        assert code == 0 and out.exists()

    def test_augment_then_train_classifier(self, workspace, tmp_path, capsys):
        gen_dir = tmp_path / "gen"
        calib = tmp_path / "eps.json"
        code = main([
            "augment", "--checkpoint", str(workspace / "run" / "checkpoint.ddck"),
            "--data", str(workspace / "data" / "manifest.csv"),
            "--ngen", "2", "--outdir", str(gen_dir), "--calibration", str(calib),
        ])
        assert code == 0
        assert json.loads(calib.read_text())
        gen_rows = list(csv.DictReader(open(gen_dir / "manifest.csv")))
        assert len(gen_rows) == 2 * 5
        trend = tmp_path / "trend.csv"
        code = main([
            "train-classifier", "--data", str(workspace / "data" / "manifest.csv"),
            str(gen_dir / "manifest.csv"), "--epochs", "1", "--ngen", "2", "--out", str(trend),
        ])
        assert code == 0
        assert "accuracy" in capsys.readouterr().out
        assert trend.exists()


class TestEvalGrid:
    def test_grid_over_preset_subset(self, workspace, tmp_path, capsys):
        out = tmp_path / "grid"
        code = main([
            "eval-grid", "--data", str(workspace / "data" / "manifest.csv"),
            "--outdir", str(out), "--presets", "A,C", "--epochs", "1", "--batch-size", "32",
        ])
        assert code == 0
        rows = list(csv.DictReader(open(out / "grid.csv")))
        assert [r["preset"] for r in rows] == ["A", "C"]
        assert rows[1]["acc_z"] == ""  # attribute-decoder preset has no attribute head
        assert (out / "grid.png").exists()
        printed = capsys.readouterr().out
        assert "--" in printed


class TestErrorsAndHelp:
    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0

    def test_subcommand_help(self):
        for sub in ["gen-data", "train", "eval", "eval-grid", "edit", "mix", "augment", "serve"]:
            with pytest.raises(SystemExit) as exc:
                main([sub, "--help"])
            assert exc.value.code == 0

    def test_module_error_gives_nonzero_exit(self, tmp_path):
        code = main(["eval", "--checkpoint", str(tmp_path / "missing.ddck"), "--data", "x.csv"])
        assert code == 1
