import logging

import click

from app.helpers.run_manager import RunContext, print_plan, run_options
from app.services.srv_cohort import CohortService
from app.services.srv_synth import SynthService

logger = logging.getLogger(__name__)


def cmd_synth(ctx: RunContext) -> str:
    """Generate a synthetic cohort from the root seed and write it under `out`."""
    config = ctx.config.synth.model_copy(update={"seed": ctx.config.seed})
    if ctx.dry_run:
        print_plan("synth-data", [
            ("patients", config.num_patients),
            ("latent dim", config.latent_dim),
            ("features", {m: getattr(config, m).num_features for m in ("rna", "dnam", "cnv")}),
            ("output", ctx.config.out),
        ])
        return ""
    cohort, _ = SynthService(config).generate_cohort()
    return CohortService.save_cohort(cohort, ctx.config.out)


@click.command("synth-data", help="Write a synthetic multimodal cohort.")
@run_options
def command(config_path, seed, out, checkpoint, force, dry_run, threads):
    ctx = RunContext.create(config_path, seed, out, checkpoint, threads, force, dry_run)
    path = cmd_synth(ctx)
    if path:
        logger.info("cohort manifest written to %s", path)
