import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from amrlab.cli import main
from amrlab.data import load_dataset

CONFIGS_DIR = Path(__file__).resolve().parent.parent / "configs"


BASE_CONFIG = """\
[data.synthetic]
num_classes = 3
train_samples = 120
val_samples = 60
modality_dims = [6, 6]
signal_scales = [3.0, 1.0]
noise_stds = [1.0, 1.0]
seed = 5

[model]
encoding_dim = 4
encoder_hidden = [8]
classifier_hidden = [8]
init_seed = 2

[train]
strategy = "naive"
epochs = 2
batch_size = 32
lr = 0.05
momentum = 0.9
seed = 3

[amr]
enabled = false
ratios = [1.0, 1.0]
lambda = 1.0
lr = 0.01

[output]
dir = "out"

[matrix]
methods = ["naive", "modality_dropout"]
amr = [false, true]
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(BASE_CONFIG)
    return path


class TestGenerate:
    def test_writes_files_and_manifest(self, config_path, tmp_path, capsys):
        assert main(["generate", "--config", str(config_path)]) == 0
        out = tmp_path / "out"
        train_ds = load_dataset(out / "train.amrdata")
        assert len(train_ds) == 120
        assert train_ds.modality_dims == (6, 6)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["format"] == "AMRDATA1"
        assert manifest["synthetic"]["seed"] == 5
        assert len(manifest["config_sha256"]) == 64

    def test_byte_identical_reruns(self, config_path, tmp_path):
        main(["generate", "--config", str(config_path)])
        first = (tmp_path / "out" / "train.amrdata").read_bytes()
        main(["generate", "--config", str(config_path)])
        second = (tmp_path / "out" / "train.amrdata").read_bytes()
        assert first == second

    def test_missing_seed_names_the_key(self, tmp_path, capsys):
        bad = BASE_CONFIG.replace("seed = 5\n", "")
        path = tmp_path / "bad.toml"
        path.write_text(bad)
        assert main(["generate", "--config", str(path)]) == 2
        assert "data.synthetic.seed" in capsys.readouterr().err

    def test_seed_override(self, config_path, tmp_path):
        main(["generate", "--config", str(config_path)])
        baseline = (tmp_path / "out" / "train.amrdata").read_bytes()
        main(["generate", "--config", str(config_path), "--seed", "99"])
        overridden = (tmp_path / "out" / "train.amrdata").read_bytes()
        assert baseline != overridden

    def test_inputs_never_mutated(self, config_path, tmp_path):
        config_before = config_path.read_bytes()
        main(["generate", "--config", str(config_path)])
        data_before = (tmp_path / "out" / "train.amrdata").read_bytes()
        main(["train", "--config", str(config_path)])
        assert config_path.read_bytes() == config_before
        assert (tmp_path / "out" / "train.amrdata").read_bytes() == data_before


class TestTrain:
    def test_dry_run_validates_without_artifacts(self, config_path, tmp_path, capsys):
        assert main(["train", "--config", str(config_path), "--dry-run"]) == 0
        assert "config ok" in capsys.readouterr().out
        assert not (tmp_path / "out" / "model.ckpt").exists()

    def test_writes_checkpoint_and_metrics(self, config_path, tmp_path, capsys):
        assert main(["train", "--config", str(config_path)]) == 0
        out = tmp_path / "out"
        assert (out / "model.ckpt").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["dominance_split"] == "val"
        assert 0.0 <= metrics["final"]["accuracy"] <= 1.0
        with open(out / "history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(metrics["history"])
        assert "final:" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, config_path, tmp_path):
        main(["train", "--config", str(config_path)])
        out = tmp_path / "out"
        first = {
            name: (out / name).read_bytes()
            for name in ("model.ckpt", "metrics.json", "history.csv")
        }
        main(["train", "--config", str(config_path)])
        for name, blob in first.items():
            assert (out / name).read_bytes() == blob, name

    def test_amr_with_unimodal_strategy_is_config_error(self, tmp_path, capsys):
        text = BASE_CONFIG.replace('strategy = "naive"', 'strategy = "unimodal"').replace(
            "enabled = false", "enabled = true"
        )
        path = tmp_path / "bad.toml"
        path.write_text(text)
        assert main(["train", "--config", str(path), "--dry-run"]) == 2
        assert "amr" in capsys.readouterr().err

    def test_files_data_source(self, config_path, tmp_path):
        main(["generate", "--config", str(config_path)])
        files_cfg = BASE_CONFIG.replace(
            """[data.synthetic]
num_classes = 3
train_samples = 120
val_samples = 60
modality_dims = [6, 6]
signal_scales = [3.0, 1.0]
noise_stds = [1.0, 1.0]
seed = 5
""",
            """[data.files]
train = "out/train.amrdata"
val = "out/val.amrdata"
""",
        )
        path = tmp_path / "files.toml"
        path.write_text(files_cfg)
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "out2")]) == 0
        assert (tmp_path / "out2" / "model.ckpt").exists()

    def test_csv_data_source(self, tmp_path):
        rows = ["label,m0_0,m0_1,m1_0,m1_1"]
        rng = np.random.default_rng(0)
        for i in range(60):
            label = i % 3
            feats = rng.normal(size=4) + label
            rows.append(f"{label}," + ",".join(f"{v:.4f}" for v in feats))
        (tmp_path / "train.csv").write_text("\n".join(rows) + "\n")
        (tmp_path / "val.csv").write_text("\n".join(rows) + "\n")
        csv_cfg = BASE_CONFIG.replace(
            """[data.synthetic]
num_classes = 3
train_samples = 120
val_samples = 60
modality_dims = [6, 6]
signal_scales = [3.0, 1.0]
noise_stds = [1.0, 1.0]
seed = 5
""",
            """[data.files]
train = "train.csv"
val = "val.csv"
""",
        )
        path = tmp_path / "csv.toml"
        path.write_text(csv_cfg)
        assert main(["train", "--config", str(path)]) == 0
        assert (tmp_path / "out" / "model.ckpt").exists()

    def test_missing_files_is_config_error(self, tmp_path):
        files_cfg = BASE_CONFIG.replace(
            """[data.synthetic]
num_classes = 3
train_samples = 120
val_samples = 60
modality_dims = [6, 6]
signal_scales = [3.0, 1.0]
noise_stds = [1.0, 1.0]
seed = 5
""",
            """[data.files]
train = "nope/train.amrdata"
val = "nope/val.amrdata"
""",
        )
        path = tmp_path / "files.toml"
        path.write_text(files_cfg)
        assert main(["train", "--config", str(path)]) == 2

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergent_training_is_numeric_failure(self, tmp_path, capsys):
        hot = BASE_CONFIG.replace("lr = 0.05", "lr = 500.0").replace(
            "momentum = 0.9", "momentum = 0.99"
        )
        path = tmp_path / "hot.toml"
        path.write_text(hot)
        assert main(["train", "--config", str(path)]) == 4
        assert "numeric failure" in capsys.readouterr().err

    def test_malformed_toml_exit_2(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("[data\n")
        assert main(["train", "--config", str(path)]) == 2

    def test_unknown_key_names_path(self, tmp_path, capsys):
        path = tmp_path / "unknown.toml"
        path.write_text(BASE_CONFIG + "\n[train2]\nx = 1\n")
        assert main(["train", "--config", str(path)]) == 2
        assert "train2" in capsys.readouterr().err


class TestMatrix:
    def test_rows_and_exit_code(self, config_path, tmp_path, capsys):
        assert main(["matrix", "--config", str(config_path)]) == 0
        out = tmp_path / "out"
        with open(out / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4  # 2 methods x {plain, amr}
        assert {r["method"] for r in rows} == {"naive", "modality_dropout"}
        run_jsons = sorted(out.glob("run_*.json"))
        assert len(run_jsons) == 4
        payload = json.loads(run_jsons[0].read_text())
        assert payload["dominance_split"] == "val"

    def test_multi_seed_rows_plus_aggregate(self, config_path, tmp_path):
        simple = BASE_CONFIG.replace(
            'methods = ["naive", "modality_dropout"]', 'methods = ["naive"]'
        ).replace("amr = [false, true]", "amr = [false]")
        path = tmp_path / "single.toml"
        path.write_text(simple)
        assert main(["matrix", "--config", str(path), "--seeds", "3"]) == 0
        with open(tmp_path / "out" / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4  # 3 seed rows + aggregate
        assert rows[-1]["seed"] == "mean±std[3]"

    def test_dry_run_counts_runs(self, config_path, capsys):
        assert main(["matrix", "--config", str(config_path), "--dry-run"]) == 0
        assert "4 runs" in capsys.readouterr().out

    def test_failed_run_nonzero_exit_but_all_rows_present(self, config_path, tmp_path):
        text = BASE_CONFIG.replace(
            'methods = ["naive", "modality_dropout"]', 'methods = ["naive", "unimodal"]'
        )
        path = tmp_path / "withuni.toml"
        path.write_text(text)
        code = main(["matrix", "--config", str(path)])
        assert code == 2  # unimodal + amr row fails as a config error
        with open(tmp_path / "out" / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        failed = [r for r in rows if r["error"]]
        ok = [r for r in rows if not r["error"]]
        assert len(failed) == 1 and len(ok) == 3


class TestShippedConfigs:
    @pytest.mark.parametrize(
        "name,command",
        [
            ("quickstart.toml", "train"),
            ("unimodal.toml", "train"),
            ("dominance.toml", "matrix"),
            ("full_matrix.toml", "matrix"),
        ],
    )
    def test_configs_validate(self, name, command, capsys):
        code = main([command, "--config", str(CONFIGS_DIR / name), "--dry-run"])
        assert code == 0
        assert "config ok" in capsys.readouterr().out

    def test_dominance_demo_runs_under_budget(self, tmp_path):
        start = time.perf_counter()
        code = main(
            [
                "matrix",
                "--config",
                str(CONFIGS_DIR / "dominance.toml"),
                "--out",
                str(tmp_path / "demo"),
            ]
        )
        elapsed = time.perf_counter() - start
        assert code == 0
        assert elapsed < 60.0
        with open(tmp_path / "demo" / "results.csv") as fh:
            rows = [r for r in csv.DictReader(fh) if not r["seed"].startswith("mean")]
        plain = [r for r in rows if r["amr_enabled"] == "false"]
        corrected = [r for r in rows if r["amr_enabled"] == "true"]
        assert len(plain) == 3 and len(corrected) == 3
        for row in plain:
            assert int(row["dominance"].split("/")[0]) >= 70
        for row in corrected:
            assert 45 <= int(row["dominance"].split("/")[0]) <= 55


class TestAttribution:
    def test_dump_matches_dataset_shape(self, config_path, tmp_path, capsys):
        main(["generate", "--config", str(config_path)])
        main(["train", "--config", str(config_path)])
        out = tmp_path / "out"
        code = main(
            [
                "attribution",
                "--checkpoint",
                str(out / "model.ckpt"),
                "--data",
                str(out / "val.amrdata"),
                "--out",
                str(out / "attribution.csv"),
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "dominance:" in stdout
        # the printed summary agrees with evaluate() on the same data
        from amrlab.harness import evaluate
        from amrlab.model import load_checkpoint

        report = evaluate(load_checkpoint(out / "model.ckpt"), load_dataset(out / "val.amrdata"))
        assert f"dominance: {report.dominance_text}" in stdout
        with open(out / "attribution.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 60 * 2  # samples x modalities
        by_sample = {}
        for row in rows:
            by_sample.setdefault(row["sample_index"], 0.0)
            by_sample[row["sample_index"]] += float(row["normalized"])
        for total in by_sample.values():
            assert abs(total - 1.0) < 1e-9

    def test_incompatible_data_rejected_before_output(self, config_path, tmp_path):
        main(["generate", "--config", str(config_path)])
        main(["train", "--config", str(config_path)])
        out = tmp_path / "out"
        other = BASE_CONFIG.replace("modality_dims = [6, 6]", "modality_dims = [4, 4]")
        other_path = tmp_path / "other.toml"
        other_path.write_text(other)
        main(["generate", "--config", str(other_path), "--out", str(tmp_path / "other_out")])
        code = main(
            [
                "attribution",
                "--checkpoint",
                str(out / "model.ckpt"),
                "--data",
                str(tmp_path / "other_out" / "val.amrdata"),
                "--out",
                str(tmp_path / "never.csv"),
            ]
        )
        assert code == 2
        assert not (tmp_path / "never.csv").exists()

    def test_bad_checkpoint_is_data_error(self, config_path, tmp_path):
        main(["generate", "--config", str(config_path)])
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        code = main(
            [
                "attribution",
                "--checkpoint",
                str(bad),
                "--data",
                str(tmp_path / "out" / "val.amrdata"),
            ]
        )
        assert code == 3
