import logging
import os
from typing import List

import click

from app.helpers.enums import CohortSplit
from app.helpers.exception_handler import DataValidationError
from app.helpers.run_manager import RunContext, print_plan, run_options, written
from app.services.srv_cohort import CohortService
from app.services.srv_model import ModelService
from app.services.srv_recon_eval import default_grid, evaluate_combinations, write_reports

logger = logging.getLogger(__name__)


def load_generation_inputs(ctx: RunContext):
    """Checkpoint model and the held-out cohort restricted to the checkpoint's features."""
    config = ctx.config
    checkpoint = ctx.require("checkpoint")
    cohort_path = config.data.eval_cohort or ctx.require("data.cohort")
    model, data = ModelService.model_from_checkpoint(checkpoint)
    model.eval()
    cohort, _ = CohortService.prepare_cohort(
        cohort_path, config.data, CohortSplit.DOWNSTREAM, data.feature_selection or None, data.groupings
    )
    return model, cohort


def cmd_generate(ctx: RunContext) -> List[str]:
    config = ctx.config
    combos = config.generate.combos
    if ctx.dry_run:
        checkpoint = ctx.require("checkpoint")
        if not os.path.isfile(checkpoint):
            raise DataValidationError("checkpoint not found", field=checkpoint)
        print_plan("generate", [
            ("checkpoint", checkpoint),
            ("cohort", config.data.eval_cohort or ctx.require("data.cohort")),
            *[(f"combo {i}", combo.label) for i, combo in enumerate(combos)],
            ("threshold step", config.generate.threshold_step),
            ("output", config.out),
        ])
        return []
    model, cohort = load_generation_inputs(ctx)
    reports, profiles = evaluate_combinations(model, cohort, combos, default_grid(config.generate.threshold_step))
    return write_reports(reports, config.out, profiles if config.generate.write_profiles else None)


@click.command("generate", help="Any-to-any omics generation with per-feature Pearson reports.")
@run_options
def command(config_path, seed, out, checkpoint, force, dry_run, threads):
    ctx = RunContext.create(config_path, seed, out, checkpoint, threads, force, dry_run)
    written(cmd_generate(ctx))
