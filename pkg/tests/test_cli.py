import json
from pathlib import Path

import numpy as np
import pytest

from causal_voxel.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small end-to-end CLI workspace: dataset, model, regression."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    reg_path = root / "reg.json"
    rc = main([
        "sample-dataset", "--n", "12", "--seed", "5", "--out-dir", str(data_dir),
        "--dims", "32,32,32", "--spacing", "6.0",
        "--fit-regression", str(reg_path),
    ])
    assert rc == 0
    scm_path = root / "scm.json"
    rc = main([
        "train-scm", "--graph", "default", "--data", str(data_dir / "manifest.csv"),
        "--out", str(scm_path), "--seed", "1", "--epochs", "12",
    ])
    assert rc == 0
    return root, data_dir, scm_path, reg_path


class TestSampleDataset:
    def test_artifacts_and_config_echo(self, workspace):
        root, data_dir, _, reg_path = workspace
        assert (data_dir / "manifest.csv").exists()
        assert (data_dir / "manifest.meta.json").exists()
        assert reg_path.exists()
        echo = json.loads((data_dir / "resolved_config.json").read_text())
        assert echo["seed"] == 5 and echo["n"] == 12

    def test_byte_identical_reruns(self, tmp_path):
        args = ["sample-dataset", "--n", "4", "--seed", "3",
                "--dims", "32,32,32", "--spacing", "6.0"]
        assert main(args + ["--out-dir", str(tmp_path / "one")]) == 0
        assert main(args + ["--out-dir", str(tmp_path / "two")]) == 0
        a = (tmp_path / "one/manifest.csv").read_bytes()
        b = (tmp_path / "two/manifest.csv").read_bytes()
        assert a == b
        for vol in sorted((tmp_path / "one/volumes").iterdir()):
            twin = tmp_path / "two/volumes" / vol.name
            assert vol.read_bytes() == twin.read_bytes()


class TestTrainAndEval:
    def test_model_and_history_written(self, workspace):
        root, _, scm_path, _ = workspace
        payload = json.loads(scm_path.read_text())
        assert set(payload["mechanisms"]) == {"m", "b", "v", "g"}
        history = scm_path.with_name(scm_path.stem + "_history.csv")
        assert history.read_text().startswith("mechanism,epoch,train_nll,val_nll")

    def test_eval_loglik_table(self, workspace, tmp_path):
        root, data_dir, scm_path, _ = workspace
        out = tmp_path / "table.csv"
        rc = main([
            "eval-loglik", "--scm", str(scm_path),
            "--data", str(data_dir / "manifest.csv"), "--out", str(out),
        ])
        assert rc == 0
        header = out.read_text().splitlines()[0]
        assert header.startswith("method,")
        for label in ("Brain volume", "Ventricle volume", "GM volume", "Score"):
            assert label in header.split(",")


class TestInvertAndCounterfactual:
    def test_invert_writes_summary(self, workspace, tmp_path):
        root, data_dir, _, _ = workspace
        from causal_voxel.dataset_io import read_manifest

        manifest = read_manifest(data_dir / "manifest.csv")
        image = data_dir / manifest.records[0].image_path
        out = tmp_path / "inv.json"
        rc = main(["invert", "--image", str(image), "--out", str(out),
                   "--budget", "120", "--seed", "0"])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert len(payload["w_hat"]) == 8
        assert payload["l1_error"] < 0.01

    def test_counterfactual_artifacts(self, workspace, tmp_path):
        root, data_dir, scm_path, reg_path = workspace
        from causal_voxel.dataset_io import read_manifest, read_volume

        manifest = read_manifest(data_dir / "manifest.csv")
        image = data_dir / manifest.records[0].image_path
        out = tmp_path / "cf.nii"
        rc = main([
            "counterfactual", "--image", str(image), "--set", "mmse=30",
            "--scm", str(scm_path), "--reg", str(reg_path), "--out", str(out),
            "--seed", "0",
        ])
        assert rc == 0
        assert read_volume(out).dims == (32, 32, 32)
        audit = json.loads((tmp_path / "cf.nii.audit.json").read_text())
        assert audit["interventions"] == {"m": 30.0}
        assert "counterfactual_evidence" in audit and "ssim" in audit

    def test_bad_intervention_format(self, workspace, tmp_path, capsys):
        root, data_dir, scm_path, reg_path = workspace
        from causal_voxel.dataset_io import read_manifest

        manifest = read_manifest(data_dir / "manifest.csv")
        image = data_dir / manifest.records[0].image_path
        rc = main([
            "counterfactual", "--image", str(image), "--set", "mmse",
            "--scm", str(scm_path), "--reg", str(reg_path),
            "--out", str(tmp_path / "cf.nii"),
        ])
        assert rc == 1
        assert "VAR=VALUE" in capsys.readouterr().err


class TestEvalVolumes:
    def test_table_layout(self, workspace, tmp_path):
        root, data_dir, _, reg_path = workspace
        out = tmp_path / "volumes.csv"
        rc = main([
            "eval-volumes", "--manifest", str(data_dir / "manifest.csv"),
            "--reg", str(reg_path), "--settings", "-15,15", "--n", "2",
            "--out", str(out),
        ])
        assert rc == 0
        text = out.read_text()
        assert "change/brain/-0.15" in text
        assert "ssim/ventricle/+0.15" in text
        assert out.with_suffix(".json").exists()


class TestMetricsCommand:
    def test_report(self, workspace, tmp_path):
        root, data_dir, _, _ = workspace
        out = tmp_path / "report.json"
        rc = main([
            "metrics", "--manifest-a", str(data_dir / "manifest.csv"),
            "--manifest-b", str(data_dir / "manifest.csv"), "--n", "10",
            "--feature-dim", "8", "--out", str(out),
        ])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["bmmd2_images"] == pytest.approx(0.0, abs=1e-12)
        assert payload["frechet_features"] < 1e-6


class TestUsage:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["invert", "--image", "x.nii", "--out", "y.json", "--bogus"])
        assert exc.value.code == 2

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        rc = main(["invert", "--image", str(tmp_path / "nope.nii"),
                   "--out", str(tmp_path / "o.json")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    @pytest.mark.parametrize("command", [
        "train-scm", "eval-loglik", "sample-dataset", "invert",
        "counterfactual", "eval-volumes", "metrics", "serve",
    ])
    def test_help_exits_zero(self, command):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0

    def test_config_file_precedence(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"n": 3, "dims": "32,32,32", "spacing": 6.0}))
        out = tmp_path / "data"
        rc = main(["sample-dataset", "--config", str(config), "--n", "2",
                   "--out-dir", str(out), "--seed", "1"])
        assert rc == 0
        echo = json.loads((out / "resolved_config.json").read_text())
        assert echo["n"] == 2  # flag beats config
        assert echo["spacing"] == 6.0  # config beats default
