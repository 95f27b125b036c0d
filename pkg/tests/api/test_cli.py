import os

import pandas as pd
import pytest

from app.core.config import settings
from app.main import app

SMALL_RUN = """
[synth]
num_patients = 16
latent_dim = 3
patches_min = 3
patches_max = 6
patch_dim = 6
chromosomes = 2
pretrain_fraction = 0.5

[synth.rna]
num_features = 12
num_groups = 3

[synth.dnam]
num_features = 10
num_groups = 2

[synth.cnv]
num_features = 8
num_groups = 2

[model]
d = 8
heads = 2
mlp_dim = 8
dropout = 0.0
num_prototypes = 2
patch_sample = 4

[pretrain]
epochs = 1
batch_size = 4
warmup_epochs = 0
checkpoint_every = 0

[survival]
folds = 2
epochs = 1
batch_size = 4
num_intervals = 2
warmup_epochs = 0
"""


@pytest.fixture()
def run_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(SMALL_RUN)
    return str(path)


def tree(root):
    files = {}
    for base, _, names in os.walk(root):
        for name in names:
            if name == settings.EFFECTIVE_CONFIG_NAME:
                continue
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                files[os.path.relpath(path, root)] = fh.read()
    return files


class TestSynthData:
    def test_deterministic(self, runner, run_config, tmp_path):
        """
            Test synth-data determinism
            Step by step:
            - Generate the same cohort twice with seed 42 into two directories
            - Expected output:
                . exit code 0 for both runs
                . byte-identical cohort trees
        """
        for name in ("a", "b"):
            result = runner.invoke(app, ["synth-data", "--config", run_config, "--seed", "42",
                                         "--out", str(tmp_path / name)])
            assert result.exit_code == 0, result.output
        first, second = tree(tmp_path / "a"), tree(tmp_path / "b")
        assert "manifest.toml" in first
        assert first == second

    def test_invalid_config_exits_2(self, runner, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[synth.survival]\ncensoring_rate = 1.5\n")
        result = runner.invoke(app, ["synth-data", "--config", str(path), "--out", str(tmp_path / "o")])
        assert result.exit_code == 2

    def test_non_empty_out_exits_2(self, runner, run_config, tmp_path):
        (tmp_path / "o").mkdir()
        (tmp_path / "o" / "keep.txt").write_text("x")
        result = runner.invoke(app, ["synth-data", "--config", run_config, "--out", str(tmp_path / "o")])
        assert result.exit_code == 2

    def test_dry_run(self, runner, run_config, tmp_path):
        result = runner.invoke(app, ["synth-data", "--config", run_config, "--dry-run",
                                     "--out", str(tmp_path / "o")])
        assert result.exit_code == 0
        assert not (tmp_path / "o").exists()


class TestGenerate:
    def test_missing_checkpoint_exits_3(self, runner, tmp_path):
        result = runner.invoke(app, ["generate", "--checkpoint", str(tmp_path / "absent.ckpt"),
                                     "--out", str(tmp_path / "o")])
        assert result.exit_code == 3

    def test_dry_run_missing_checkpoint_exits_3(self, runner, tmp_path):
        result = runner.invoke(app, ["generate", "--dry-run", "--checkpoint", str(tmp_path / "absent.ckpt")])
        assert result.exit_code == 3

    def test_pretrain_requires_cohort(self, runner, tmp_path):
        result = runner.invoke(app, ["pretrain", "--out", str(tmp_path / "o")])
        assert result.exit_code == 2


@pytest.fixture()
def synth_cohort(runner, run_config, tmp_path):
    result = runner.invoke(app, ["synth-data", "--config", run_config, "--seed", "5",
                                 "--out", str(tmp_path / "cohort")])
    assert result.exit_code == 0, result.output
    return str(tmp_path / "cohort" / "manifest.toml")


class TestDataAndConfigErrors:
    def test_too_many_clusters_exits_2(self, runner, run_config, synth_cohort, tmp_path):
        """
            Test a cluster count larger than the methylation feature count
            Step by step:
            - Pre-train with data.num_clusters.dnam = 10000 on a 10-feature methylation profile
            - Expected output:
                . exit code 2, no traceback
        """
        with open(run_config, "a") as fh:
            fh.write(f'\n[data]\ncohort = "{synth_cohort}"\nnum_clusters = {{ dnam = 10000 }}\n')
        result = runner.invoke(app, ["pretrain", "--config", run_config, "--out", str(tmp_path / "o")])
        assert result.exit_code == 2, result.output
        assert not isinstance(result.exception, ValueError)

    def test_unreachable_std_threshold_exits_2(self, runner, run_config, synth_cohort, tmp_path):
        with open(run_config, "a") as fh:
            fh.write(f'\n[data]\ncohort = "{synth_cohort}"\nstd_threshold = {{ rna = 1e9 }}\n')
        result = runner.invoke(app, ["pretrain", "--config", run_config, "--out", str(tmp_path / "o")])
        assert result.exit_code == 2, result.output

    def test_patch_dim_mismatch_exits_3(self, runner, run_config, synth_cohort, tmp_path):
        """
            Test generation on a cohort whose patch embeddings differ from the checkpoint's
            Step by step:
            - Pre-train on a cohort with 6-dimensional patch embeddings
            - Generate on a second cohort with 4-dimensional patch embeddings
            - Expected output:
                . exit code 3
        """
        with open(run_config, "a") as fh:
            fh.write(f'\n[data]\ncohort = "{synth_cohort}"\n')
        result = runner.invoke(app, ["pretrain", "--config", run_config, "--out", str(tmp_path / "pre")])
        assert result.exit_code == 0, result.output

        other = tmp_path / "other.toml"
        other.write_text(SMALL_RUN.replace("patch_dim = 6", "patch_dim = 4"))
        result = runner.invoke(app, ["synth-data", "--config", str(other), "--out", str(tmp_path / "cohort4")])
        assert result.exit_code == 0, result.output
        with open(other, "a") as fh:
            fh.write(f'\n[data]\ncohort = "{tmp_path / "cohort4" / "manifest.toml"}"\n')
        checkpoint = str(tmp_path / "pre" / settings.CHECKPOINT_NAME)
        result = runner.invoke(app, ["generate", "--config", str(other), "--checkpoint", checkpoint,
                                     "--out", str(tmp_path / "gen")])
        assert result.exit_code == 3, result.output


class TestEndToEnd:
    def test_pretrain_generate_finetune(self, runner, run_config, tmp_path):
        """
            Test the command chain on a small synthetic cohort
            Step by step:
            - synth-data, then pretrain on its pre-training split
            - generate and finetune-survival from the checkpoint
            - Expected output:
                . every command exits 0
                . checkpoint, reconstruction summary and survival predictions are written
        """
        cohort = tmp_path / "cohort"
        manifest = str(cohort / "manifest.toml")
        pretrain = tmp_path / "pretrain"
        checkpoint = str(pretrain / settings.CHECKPOINT_NAME)

        steps = [
            ["synth-data", "--config", run_config, "--seed", "3", "--out", str(cohort)],
            ["pretrain", "--config", run_config, "--seed", "3", "--out", str(pretrain)],
            ["generate", "--config", run_config, "--checkpoint", checkpoint, "--out", str(tmp_path / "gen")],
            ["finetune-survival", "--config", run_config, "--checkpoint", checkpoint,
             "--out", str(tmp_path / "surv")],
        ]
        with open(run_config, "a") as fh:
            fh.write(f'\n[data]\ncohort = "{manifest}"\n')
        for args in steps:
            result = runner.invoke(app, args)
            assert result.exit_code == 0, (args[0], result.output)

        assert os.path.isfile(checkpoint)
        assert os.path.isfile(pretrain / settings.TRAIN_LOG_NAME)
        summary = pd.read_csv(tmp_path / "gen" / "recon_summary.csv")
        assert len(summary) == 9
        predictions = pd.read_csv(tmp_path / "surv" / "survival_predictions.csv")
        assert list(predictions.columns) == ["patient_id", "fold", "risk", "survival_1", "survival_2"]
        assert (tmp_path / "surv" / "survival_metrics.csv").is_file()
