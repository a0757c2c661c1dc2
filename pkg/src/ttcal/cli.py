"""Command-line interface: ``ttcal gen|train|finetune|calibrate|evaluate|run|compare``."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from .curves import CalibrationTarget, ThresholdGrid, mae_comb, pointwise_ae, solve_threshold
from .errors import InvalidArgument
from .experiment import ConfigError, compare, load_config, run_experiment, write_compare
from .io import read_curve, read_embeddings, write_curve, write_embeddings
from .net import load_model, save_model
from .synth import generate_scenario
from .ttc import (CalibratorModel, TrainConfig, calibrate, finetune, load_calibrator, pretrain,
                  save_calibrator, tau_cv_table)

SPLITS = ("train", "cal", "test")


def _fail(msg: str, code: int = 1):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load_cfg(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(str(exc), 2)


def _stage_config(config_path, section: str, steps, seed) -> TrainConfig:
    if config_path:
        cfg = getattr(_load_cfg(config_path), section)
    else:
        cfg = TrainConfig(steps=1000 if section == "finetune" else 300,
                          stage="finetune" if section == "finetune" else "pretrain")
    if steps is not None:
        cfg = replace(cfg, steps=steps)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _split(scenario: Path, name: str):
    path = scenario / f"{name}.ttc"
    if not path.exists():
        _fail(f"{path} not found; create the scenario with 'ttcal gen'")
    return read_embeddings(path)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def cli(verbose):
    """Transductive distance-threshold calibration toolkit."""
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def gen(config_path, out):
    """Write train/cal/test embedding files for the first configured seed."""
    cfg = _load_cfg(config_path)
    part = generate_scenario(replace(cfg.scenario, seed=cfg.seeds[0]))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_embeddings(out / f"{name}.ttc", getattr(part, name))
    (out / "scenario.json").write_text(json.dumps(
        {"kind": cfg.scenario.scenario_kind, "seed": cfg.seeds[0],
         "sizes": {n: len(getattr(part, n)) for n in SPLITS}}, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {', '.join(f'{n}.ttc' for n in SPLITS)} to {out}")


@cli.command()
@click.option("--scenario", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Take hyperparameters from the [train] and [network] sections.")
@click.option("--steps", type=click.IntRange(min=1))
@click.option("--seed", type=int)
def train(scenario, out, config_path, steps, seed):
    """Pretrain encoder and head on the scenario's training split."""
    cfg = _stage_config(config_path, "train", steps, seed)
    d_train = _split(Path(scenario), "train")
    dims = _load_cfg(config_path).network if config_path else None
    res = pretrain(cfg, d_train, dims)
    save_model(out, res.params, provenance={"pretrain": cfg.as_dict()})
    click.echo(f"pretrained {cfg.steps} steps, final loss {res.losses[-1]:.4f}; wrote {out}")


@cli.command(name="finetune")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scenario", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Take hyperparameters from the [finetune] and [inference] sections.")
@click.option("--steps", type=click.IntRange(min=1))
@click.option("--seed", type=int)
@click.option("--pretrain-only", is_flag=True, help="Skip head training; only select tau.")
def finetune_cmd(model_path, scenario, out, config_path, steps, seed, pretrain_only):
    """Refit the head on the calibration split and select tau by cross-validation."""
    params, _, grid, prov = load_model(model_path)
    prov.pop("tau_cv", None)
    d_cal = _split(Path(scenario), "cal")
    if not pretrain_only:
        cfg = _stage_config(config_path, "finetune", steps, seed)
        params = finetune(params, cfg, d_cal).params
        prov["finetune"] = cfg.as_dict()
    inf = _load_cfg(config_path).inference if config_path else None
    kw = {} if inf is None else dict(folds=inf.cv_folds, batch_size=inf.batch_size,
                                     n_subgraphs=inf.subgraphs)
    table = tau_cv_table(params, d_cal, grid=ThresholdGrid(*grid), **kw)
    model = CalibratorModel(params, table.select(), ThresholdGrid(*grid), prov, table)
    save_calibrator(out, model)
    click.echo(f"tau = {model.tau:g}; wrote {out}")


@cli.command(name="calibrate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", "targets", multiple=True, required=True,
              help="Repeatable, e.g. tpr=0.9 or tnr=0.8.")
@click.option("--labeled", is_flag=True, help="Also report the true curve and errors.")
@click.option("--curve-out", type=click.Path(dir_okay=False), help="Write the estimated curve CSV.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--prior-match/--no-prior-match", default=True, show_default=True,
              help="Reselect tau for the same-label pair share estimated on the test set.")
@click.option("--prior-odds-cap", type=click.FloatRange(min=1.0), default=10.0, show_default=True)
def calibrate_cmd(model_path, test_path, targets, labeled, curve_out, seed, prior_match,
                  prior_odds_cap):
    """Estimate the test TPR/TNR curves and solve each target threshold."""
    try:
        parsed = [CalibrationTarget.parse(t) for t in targets]
    except InvalidArgument as exc:
        _fail(str(exc), 2)
    model = load_calibrator(model_path)
    d_test = read_embeddings(test_path)
    if not labeled:
        d_test = d_test.unlabeled()
    elif d_test.labels is None:
        _fail(f"{test_path} has no labels; drop --labeled", 2)
    report = calibrate(model, d_test, parsed, match_prior=prior_match, prior_odds_cap=prior_odds_cap,
                       batch_size=min(64, len(d_test)), seed=seed)
    if curve_out:
        write_curve(curve_out, report.estimated)
    state = "converged" if report.converged else "hit max rounds"
    click.echo(f"tau {report.tau:g}; {state} after {report.rounds} rounds")
    for t in parsed:
        line = f"{t.tag}: threshold {report.d_opt[t.tag]:.2f}"
        if report.true is not None:
            line += f"  (abs error {report.ae[t.tag]:.4f})"
        click.echo(line)
    if report.mae_comb is not None:
        click.echo(f"mae_comb {report.mae_comb:.6f}")


@cli.command()
@click.option("--est", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--true", "true_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", "targets", multiple=True, default=("tpr=0.8", "tpr=0.9", "tnr=0.8", "tnr=0.9"),
              show_default=True)
def evaluate(est, true_path, targets):
    """Score an estimated curve CSV against a true curve CSV."""
    e, t = read_curve(est), read_curve(true_path)
    if e.grid != t.grid:
        _fail("estimated and true curves use different threshold grids", 2)
    click.echo(f"mae_comb {mae_comb(e, t):.10g}")
    for spec in targets:
        target = CalibrationTarget.parse(spec)
        d = solve_threshold(e, target)
        click.echo(f"{target.tag}: threshold {d:.2f} abs error {pointwise_ae(t, d, target):.6g}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def run(config_path):
    """Run every configured method and write curves, plots and summary.csv."""
    cfg = _load_cfg(config_path)
    rows, failures = run_experiment(cfg)
    click.echo(f"wrote {len(rows)} summary rows to {cfg.output_dir / 'summary.csv'}")
    if failures:
        for f in failures:
            click.echo(f"method failed: {f}", err=True)
        sys.exit(1)


@cli.command(name="compare")
@click.argument("files", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Write the ranking CSV here.")
def compare_cmd(files, out):
    """Rank methods across summary CSVs by mean rank of mae_comb."""
    try:
        table = compare(files)
    except InvalidArgument as exc:
        _fail(str(exc), 2)
    if out:
        write_compare(out, table)
    for r in table:
        imp = "" if r["improvement"] is None else f"  improvement {100 * r['improvement']:.2f}%"
        click.echo(f"{r['scenario']:<18} {r['method']:<13} rank {r['mean_rank']:.2f}  "
                   f"mae {r['mean_mae_comb']:.5f}{imp}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="ttcal", standalone_mode=True)
    except (ValueError, RuntimeError, ArithmeticError, OSError) as exc:
        _fail(f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    main()
