import copy
import logging
from typing import List

import click
import pandas as pd

from app.helpers.enums import CohortSplit, FinetuneTask
from app.helpers.run_manager import RunContext, print_plan, run_options, written
from app.schemas.sche_report import MetricRow
from app.services.srv_cohort import CohortService
from app.services.srv_downstream import few_shot_protocol, survival_cv
from app.services.srv_model import ModelService

logger = logging.getLogger(__name__)


def write_metrics(rows: List[MetricRow], path: str) -> str:
    pd.DataFrame([row.model_dump() for row in rows], columns=list(MetricRow.model_fields)).to_csv(
        path, index=False, float_format="%.17g"
    )
    return path


def backbone_and_cohort(ctx: RunContext):
    """
    Downstream cohort plus a factory of backbones: copies of the checkpoint model, or
    (scratch mode, no checkpoint) fresh initialisations seeded per run.
    """
    config = ctx.config
    cohort_path = config.data.eval_cohort or ctx.require("data.cohort")
    if config.checkpoint:
        model, data = ModelService.model_from_checkpoint(config.checkpoint)
        cohort, _ = CohortService.prepare_cohort(
            cohort_path, config.data, CohortSplit.DOWNSTREAM, data.feature_selection or None, data.groupings
        )
        return (lambda run: copy.deepcopy(model)), cohort, model.config.patch_sample

    logger.info("no checkpoint given: fine-tuning from scratch")
    cohort, _ = CohortService.prepare_cohort(cohort_path, config.data, CohortSplit.DOWNSTREAM)
    model_config = config.model.model_copy(update={"patch_dim": cohort.patch_dim})

    def factory(run):
        return ModelService.build_model(model_config, cohort.groupings, ctx.streams.torch_seed("init", 3, run))

    return factory, cohort, model_config.patch_sample


def cmd_finetune(ctx: RunContext, task: FinetuneTask) -> List[str]:
    config = ctx.config
    section = config.subtype if task == FinetuneTask.SUBTYPE else config.survival
    if ctx.dry_run:
        rows = [
            ("task", task.value),
            ("initialisation", config.checkpoint or "scratch"),
            ("visible omics", ",".join(m.value for m in section.visible) or "wsi only"),
            ("scope", section.finetune_scope.value),
            ("epochs", section.epochs),
        ]
        if task == FinetuneTask.SUBTYPE:
            rows += [("k", section.k), ("runs", section.runs)]
        else:
            rows += [("folds", section.folds), ("intervals", section.num_intervals)]
        print_plan(f"finetune-{task.value}", rows)
        return []

    factory, cohort, patch_sample = backbone_and_cohort(ctx)
    if task == FinetuneTask.SUBTYPE:
        result = few_shot_protocol(factory, cohort, config.subtype, config.seed, patch_sample)
        logger.info("subtype auc %.4f +/- %.4f over %d runs", result.mean, result.std, len(result.aucs))
        return [write_metrics(result.rows(), ctx.path("subtype_metrics.csv"))]

    result, predictions = survival_cv(factory, cohort, config.survival, config.seed, patch_sample)
    logger.info("survival c-index %s +/- %s over %d folds", result.mean, result.std, len(result.c_indices))
    predictions_path = ctx.path("survival_predictions.csv")
    predictions.to_csv(predictions_path, index=False, float_format="%.17g")
    return [write_metrics(result.rows(), ctx.path("survival_metrics.csv")), predictions_path]


@click.command("finetune-subtype", help="Few-shot subtype classification from the <cls> token.")
@run_options
def subtype_command(config_path, seed, out, checkpoint, force, dry_run, threads):
    ctx = RunContext.create(config_path, seed, out, checkpoint, threads, force, dry_run)
    written(cmd_finetune(ctx, FinetuneTask.SUBTYPE))


@click.command("finetune-survival", help="Cross-validated discrete-time survival prediction.")
@run_options
def survival_command(config_path, seed, out, checkpoint, force, dry_run, threads):
    ctx = RunContext.create(config_path, seed, out, checkpoint, threads, force, dry_run)
    written(cmd_finetune(ctx, FinetuneTask.SURVIVAL))
