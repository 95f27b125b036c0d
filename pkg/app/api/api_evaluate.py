import logging
from typing import List

import click
import numpy as np
import pandas as pd

from app.api.api_generate import load_generation_inputs
from app.helpers.enums import Modality
from app.helpers.run_manager import RunContext, print_plan, run_options, written
from app.services.srv_model import ModelService
from app.services.srv_recon_eval import (
    build_report,
    check_combos,
    default_grid,
    direction_of_change,
    feature_ids,
)
from app.services.srv_synth import linear_oracle, oracle_split

logger = logging.getLogger(__name__)

SUMMARY_NAME = "evaluation_summary.csv"
DIRECTION_NAME = "direction_of_change.csv"


def _median(r: np.ndarray):
    defined = r[np.isfinite(r)]
    return float(np.median(defined)) if defined.size else None


def cmd_evaluate(ctx: RunContext) -> List[str]:
    """
    Compare the model's median Pearson with the ridge oracle on the same held-out
    half for every combo, then score direction of change between subtypes.
    """
    config = ctx.config
    section = config.evaluate
    if ctx.dry_run:
        print_plan("evaluate", [
            ("checkpoint", ctx.require("checkpoint")),
            *[(f"combo {i}", combo.label) for i, combo in enumerate(section.combos)],
            ("oracle fit fraction", section.oracle_fit_fraction),
            ("direction target", section.direction_target.value),
            ("significance level", section.significance_level),
        ])
        return []

    model, cohort = load_generation_inputs(ctx)
    check_combos(cohort, section.combos)
    _, eval_idx = oracle_split(len(cohort), section.oracle_fit_fraction, config.seed)
    held_out = cohort.subset([cohort.ids[i] for i in eval_idx])
    grid = default_grid(section.threshold_step)

    rows = []
    for combo in section.combos:
        generated = ModelService.generate(
            model, held_out.records, combo.inputs, [combo.target], held_out.feature_counts
        )[combo.target]
        report = build_report(
            combo.inputs, combo.target, generated, held_out.omics_matrix(combo.target),
            feature_ids(held_out, combo.target), grid,
        )
        oracle = _median(linear_oracle(
            cohort, [Modality.WSI, *combo.inputs], combo.target, section.oracle_fit_fraction, config.seed
        ))
        ratio = report.median / oracle if report.median is not None and oracle else None
        logger.info("%s: model median r=%s, oracle median r=%s", combo.label, report.median, oracle)
        rows.append({
            "combo": combo.label,
            "model_median": report.median,
            "oracle_median": oracle,
            "ratio": ratio,
            "num_patients": report.num_patients,
        })

    paths = [ctx.path(SUMMARY_NAME)]
    pd.DataFrame(rows).to_csv(paths[0], index=False, float_format="%.17g")

    direction_combos = [c for c in section.combos if c.target == section.direction_target]
    if direction_combos:
        frame = direction_of_change(model, cohort, direction_combos, section.significance_level)
        paths.append(ctx.path(DIRECTION_NAME))
        frame.to_csv(paths[-1], index=False, float_format="%.17g")
    return paths


@click.command("evaluate", help="Model versus linear oracle, plus direction-of-change accuracy.")
@run_options
def command(config_path, seed, out, checkpoint, force, dry_run, threads):
    ctx = RunContext.create(config_path, seed, out, checkpoint, threads, force, dry_run)
    written(cmd_evaluate(ctx))
