import pandas as pd
import pytest
from click.testing import CliRunner

from app.core.config import settings
from app.main import app

ACCEPTANCE_RUN = """
[synth]
num_patients = 512
latent_dim = 8

[model]
d = 64
heads = 4
mlp_dim = 64
num_prototypes = 16
patch_sample = 32

[pretrain]
epochs = 50
batch_size = 64
warmup_epochs = 5
checkpoint_every = 0

[subtype]
k = 10
runs = 10
epochs = 5
lr = 1e-4

[survival]
folds = 5
epochs = 20
num_intervals = 4
"""


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cohort = root / "cohort"
    config = root / "run.toml"
    config.write_text(ACCEPTANCE_RUN + f'\n[data]\ncohort = "{cohort / "manifest.toml"}"\n')
    runner = CliRunner()
    for args in (
        ["synth-data", "--config", str(config), "--out", str(cohort)],
        ["pretrain", "--config", str(config), "--out", str(root / "pretrain")],
    ):
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
    return runner, root, str(config), str(root / "pretrain" / settings.CHECKPOINT_NAME)


@pytest.mark.slow
class TestAcceptance:
    def test_reconstruction_tracks_oracle(self, pretrained):
        """
            Test reconstruction against the ridge oracle
            Step by step:
            - Pre-train 50 epochs on a 512-patient synthetic cohort
            - Evaluate every combo on the held-out half
            - Expected output:
                . model median r >= 0.9 x oracle median r for every combo
                . adding rna does not lower dnam reconstruction
        """
        runner, root, config, checkpoint = pretrained
        result = runner.invoke(app, ["evaluate", "--config", config, "--checkpoint", checkpoint,
                                     "--out", str(root / "evaluate")])
        assert result.exit_code == 0, result.output
        summary = pd.read_csv(root / "evaluate" / "evaluation_summary.csv").set_index("combo")
        assert (summary["ratio"] >= 0.9).all(), summary
        assert summary.loc["wsi+rna->dnam", "model_median"] >= summary.loc["wsi->dnam", "model_median"]

    def test_few_shot_subtyping(self, pretrained):
        runner, root, config, checkpoint = pretrained
        result = runner.invoke(app, ["finetune-subtype", "--config", config, "--checkpoint", checkpoint,
                                     "--out", str(root / "subtype")])
        assert result.exit_code == 0, result.output
        metrics = pd.read_csv(root / "subtype" / "subtype_metrics.csv")
        assert metrics.loc[metrics["metric"] == "auc_mean", "value"].item() >= 0.9

    def test_survival(self, pretrained):
        runner, root, config, checkpoint = pretrained
        result = runner.invoke(app, ["finetune-survival", "--config", config, "--checkpoint", checkpoint,
                                     "--out", str(root / "survival")])
        assert result.exit_code == 0, result.output
        metrics = pd.read_csv(root / "survival" / "survival_metrics.csv")
        assert metrics.loc[metrics["metric"] == "c_index_mean", "value"].item() >= 0.95


SWEEP_RUN = """
[synth]
num_patients = 256
latent_dim = 8

[model]
d = 32
heads = 4
mlp_dim = 32
num_prototypes = 8
patch_sample = 16

[pretrain]
epochs = 30
batch_size = 64
warmup_epochs = 3
checkpoint_every = 0

[subtype]
k = 10
runs = 5
epochs = 5
lr = 1e-4
"""

SWEEP_SEEDS = range(5)


@pytest.fixture(scope="module")
def seed_sweep(tmp_path_factory):
    """One synthetic cohort and pre-trained checkpoint per seed."""
    runner = CliRunner()
    runs = []
    for seed in SWEEP_SEEDS:
        root = tmp_path_factory.mktemp(f"sweep{seed}")
        cohort = root / "cohort"
        config = root / "run.toml"
        config.write_text(SWEEP_RUN + f'\n[data]\ncohort = "{cohort / "manifest.toml"}"\n')
        for args in (
            ["synth-data", "--config", str(config), "--seed", str(seed), "--out", str(cohort)],
            ["pretrain", "--config", str(config), "--seed", str(seed), "--out", str(root / "pretrain")],
        ):
            result = runner.invoke(app, args)
            assert result.exit_code == 0, result.output
        runs.append((seed, root, str(config), str(root / "pretrain" / settings.CHECKPOINT_NAME)))
    return runner, runs


def metric(path, name):
    metrics = pd.read_csv(path)
    return metrics.loc[metrics["metric"] == name, "value"].item()


@pytest.mark.slow
class TestSeedSweep:
    def test_pretrained_beats_scratch(self, seed_sweep):
        """
            Test few-shot subtyping from the checkpoint against a scratch backbone
            Step by step:
            - For 5 seeds, fine-tune k=10 subtype classifiers with and without the checkpoint
            - Expected output:
                . mean AUC over seeds from the checkpoint >= mean AUC from scratch
        """
        runner, runs = seed_sweep
        pretrained, scratch = [], []
        for seed, root, config, checkpoint in runs:
            for name, extra, sink in (
                ("subtype", ["--checkpoint", checkpoint], pretrained),
                ("subtype_scratch", [], scratch),
            ):
                result = runner.invoke(app, ["finetune-subtype", "--config", config, "--seed", str(seed),
                                             *extra, "--out", str(root / name)])
                assert result.exit_code == 0, result.output
                sink.append(metric(root / name / "subtype_metrics.csv", "auc_mean"))
        assert sum(pretrained) / len(pretrained) >= sum(scratch) / len(scratch), (pretrained, scratch)

    def test_rna_adds_to_methylation(self, seed_sweep):
        """
            Test generation synergy over 3 seeds
            Step by step:
            - Generate every default combo from each of the first 3 checkpoints
            - Expected output:
                . over the seeds, the median of wsi+rna->dnam medians >= that of wsi->dnam
        """
        runner, runs = seed_sweep
        with_rna, wsi_only = [], []
        for _, root, config, checkpoint in runs[:3]:
            result = runner.invoke(app, ["generate", "--config", config, "--checkpoint", checkpoint,
                                         "--out", str(root / "generate")])
            assert result.exit_code == 0, result.output
            summary = pd.read_csv(root / "generate" / "recon_summary.csv").set_index("combo")
            with_rna.append(summary.loc["wsi+rna->dnam", "median"])
            wsi_only.append(summary.loc["wsi->dnam", "median"])
        assert pd.Series(with_rna).median() >= pd.Series(wsi_only).median(), (with_rna, wsi_only)
