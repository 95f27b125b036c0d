import logging

import click

from app.helpers.enums import CohortSplit
from app.helpers.run_manager import RunContext, print_plan, run_options
from app.services.srv_cohort import CohortService
from app.services.srv_pretrain import PretrainService

logger = logging.getLogger(__name__)


def cmd_pretrain(ctx: RunContext):
    """Pre-train on the pre-training split of `data.cohort`; returns (model, history)."""
    config = ctx.config
    cohort_path = ctx.require("data.cohort")
    if ctx.dry_run:
        print_plan("pretrain", [
            ("cohort", cohort_path),
            ("model", f"d={config.model.d} heads={config.model.heads} "
                      f"layers={config.model.encoder_layers}/{config.model.decoder_layers} "
                      f"histo={config.model.histo_mode.value}"),
            ("masking", f"r={config.model.mask_ratio} alpha={config.model.alpha}"),
            ("schedule", f"{config.pretrain.epochs} epochs, batch {config.pretrain.batch_size}, "
                         f"lr {config.pretrain.lr_start}->{config.pretrain.lr_peak}->{config.pretrain.lr_final}"),
            ("resume", config.pretrain.resume or "-"),
            ("output", config.out),
        ])
        return None, []
    cohort, selection = CohortService.prepare_cohort(cohort_path, config.data, CohortSplit.PRETRAIN)
    service = PretrainService(config.model, config.pretrain, config.seed, config.out, selection)
    return service.train(cohort)


@click.command("pretrain", help="Masked multimodal pre-training.")
@run_options
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to resume from.")
def command(config_path, seed, out, checkpoint, force, dry_run, threads, resume):
    ctx = RunContext.create(
        config_path, seed, out, checkpoint, threads, force, dry_run, overrides={"pretrain.resume": resume}
    )
    _, history = cmd_pretrain(ctx)
    if history:
        logger.info("pre-training finished: %d epochs, final loss %.6f", len(history), history[-1].loss)
