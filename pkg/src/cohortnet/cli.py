"""Command-line surface: generate / train / discover / evaluate / explain."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import exploitation, reports
from .data import SyntheticPlan, generate_synthetic, save_schema, write_dataset
from .data import FeatureSpec
from .pipeline import (PipelineConfig, base_logits_for, load_artifacts,
                       run_pipeline)


def _print_eval(tag: str, ev: dict):
    click.echo(f"{tag}: auc_roc={ev['auc_roc']:.4f} "
               f"auc_pr={ev['auc_pr']:.4f} f1={ev['f1']:.4f}")


@click.group()
def main():
    """CohortNet: cohort discovery and calibrated prediction for clinical
    time series."""


@main.command()
@click.argument("plan_path", type=click.Path(exists=True))
@click.option("--out", "out_path", default="data.ndjson", show_default=True)
@click.option("--schema", "schema_path", default="schema.json", show_default=True)
def generate(plan_path, out_path, schema_path):
    """Generate a synthetic dataset from a plan JSON."""
    plan = SyntheticPlan.from_json(plan_path)
    parsed = generate_synthetic(plan)
    specs = [FeatureSpec(f"f{i}") for i in range(plan.num_features)]
    write_dataset(out_path, parsed, specs)
    save_schema(schema_path, specs, plan.num_steps)
    positives = sum(label for _, label, _, _ in parsed)
    click.echo(f"wrote {len(parsed)} records ({positives} positive) to "
               f"{out_path}; schema in {schema_path}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def train(config_path):
    """Run all four stages and persist checkpoints, pool, and eval."""
    config = PipelineConfig.from_json(config_path)
    result = run_pipeline(config)
    click.echo(f"pool size: {0 if result.pool is None else len(result.pool)}")
    _print_eval("stage1-only", result.eval_stage1)
    _print_eval("full", result.eval_full)
    click.echo(f"artifacts in {config.out_dir}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def discover(config_path):
    """Run stages 1-3 and emit the cohort table and state report."""
    config = PipelineConfig.from_json(config_path)
    config.cohorts_enabled = True
    result = run_pipeline(config, stage4=False)
    names = [s.name for s in result.dataset.specs]
    out = Path(config.out_dir)
    table = reports.emit_cohort_table(result.pool, names, out)
    train_rows = np.array(result.part_rows["train"])
    reports.emit_state_report(result.state_models, result.states[train_rows],
                              names, out)
    click.echo(f"{len(result.pool)} cohorts discovered")
    click.echo(table.read_text().rstrip("\n"))


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def evaluate(config_path):
    """Evaluate persisted artifacts on the test split."""
    config = PipelineConfig.from_json(config_path)
    result = load_artifacts(config)
    _print_eval("stage1-only", result.eval_stage1)
    _print_eval("full", result.eval_full)


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--patient", required=True, help="patient id to explain")
def explain(config_path, patient):
    """Emit the per-patient calibration and attention reports."""
    config = PipelineConfig.from_json(config_path)
    result = load_artifacts(config)
    dataset = result.dataset
    try:
        row = next(i for i, r in enumerate(dataset.records) if r.id == patient)
    except StopIteration:
        raise click.ClickException(f"unknown patient id {patient!r}")
    names = [s.name for s in dataset.specs]
    out = Path(config.out_dir) / "reports"
    from .encoder import encode_patient
    enc_out = encode_patient(dataset.records[row], result.encoder_params,
                             result.encoder_config)
    reports.emit_attention_report(enc_out.alpha, names, out, patient)
    if result.pool is not None and result.exploit_params is not None:
        base = base_logits_for(result.cache, np.array([row]),
                               result.exploit_params)[0]
        rep = exploitation.predict_patient(
            result.cache.h_last[row], base, result.states[row], result.pool,
            result.exploit_params)
        reports.emit_calibration_report(rep, result.pool, names, out, patient)
        click.echo(f"patient {patient}: base {100 * rep.base_probability:.1f}% "
                   f"-> calibrated {100 * rep.probability:.1f}% "
                   f"(z = {rep.z:+.4f})")
    else:
        p = 1.0 / (1.0 + np.exp(-result.cache.base_logit[row]))
        click.echo(f"patient {patient}: base {100 * p:.1f}% (no cohort pool)")
    click.echo(f"reports in {out}")


if __name__ == "__main__":
    main()
