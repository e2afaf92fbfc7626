"""Command-line entry point: train, evaluate, sweep and dose-response export.

Usage:
    python src/app.py train --scenario pwm --uncertainty 0 --epochs 50 --mc 16 --seed 7
    python src/app.py eval --checkpoint runs/run/best_policy.ckpt --n-eval 20
    python src/app.py dose-response --n-points 101 --output dose_response.csv
    python src/app.py sweep --config configs/pwm_nominal.json
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from logic.env import EpisodeFailure, ScenarioError
from logic.model import DomainError
from logic.policy import CheckpointError, init_params, load_checkpoint, save_checkpoint
from logic.pwm import dose_response_table, write_dose_response_csv
from logic.settings import ConfigError, RunConfig, apply_overrides, load_run_config, save_run_config, with_output_dir
from logic.trainer import EPOCH_COLUMNS, TrainingAborted, evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORTED = 3
UNCERTAINTY_LEVELS = (0.0, 0.025, 0.05, 0.075)
SWEEP_COLUMNS = [
    "uncertainty_level", "best_epoch", "best_mean_return", "eval_mean_return", "eval_sd_return", "continuous_cost",
]


class EpochCsvWriter:
    """Streams one row per epoch to epochs.csv."""

    def __init__(self, path):
        self.path = Path(path)
        pd.DataFrame(columns=EPOCH_COLUMNS).to_csv(self.path, index=False, lineterminator="\n")

    def __call__(self, stats):
        pd.DataFrame([stats.to_row()], columns=EPOCH_COLUMNS).to_csv(
            self.path, mode="a", header=False, index=False, lineterminator="\n")


def initial_policy(master_seed):
    return init_params(np.random.default_rng(np.random.SeedSequence([master_seed])))


def resolve_config(args):
    """Defaults, then the config file, then convenience flags, then --set overrides."""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = []
    flag_fields = (
        ("scenario", "scenario.actuation_mode"),
        ("uncertainty", "scenario.uncertainty_level"),
        ("epochs", "train.n_epochs"),
        ("mc", "train.n_mc"),
        ("seed", "train.master_seed"),
        ("output_dir", "output_dir"),
        ("label", "label"),
    )
    for attr, key in flag_fields:
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    overrides.extend(args.set or [])
    return apply_overrides(cfg, overrides)


def run_training(cfg, out_dir, progress=False):
    """Train one policy and write epochs.csv, best_policy.ckpt and resolved_config.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = with_output_dir(cfg, out_dir)
    save_run_config(cfg, out_dir / "resolved_config.json")
    writer = EpochCsvWriter(out_dir / "epochs.csv")
    checkpoint_path = out_dir / "best_policy.ckpt"
    bar = tqdm(total=cfg.train.n_epochs, desc=cfg.label, disable=not progress)

    def on_epoch(stats):
        writer(stats)
        bar.update(1)
        bar.set_postfix(mean_return=f"{stats.mean_return:.4g}")

    def on_best(stats, theta):
        save_checkpoint(theta, checkpoint_path, metadata={
            "epoch": stats.epoch,
            "mean_return": stats.mean_return,
            "label": cfg.label,
            "actuation_mode": cfg.scenario.actuation_mode.value,
            "uncertainty_level": cfg.scenario.uncertainty_level,
        })

    try:
        result = train(cfg.train, cfg.scenario, initial_policy(cfg.train.master_seed), cfg.model,
                       on_epoch=on_epoch, on_best=on_best)
    finally:
        bar.close()
    logger.info("Wrote %s, %s and resolved_config.json to %s", "epochs.csv", checkpoint_path.name, out_dir)
    return result


def write_evaluation(result, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.summary_frame().to_csv(out_dir / "eval_summary.csv", index=False, lineterminator="\n")
    result.metrics_frame().to_csv(out_dir / "eval_metrics.csv", index=False, lineterminator="\n")
    for i, trace in enumerate(result.traces):
        trace.write_csv(out_dir / f"trace_{i}.csv")
    if result.deterministic_trace.failure_time is not None:
        logger.warning("Mean-action episode failed at t=%.4g h; trace_mean.csv stops there",
                       result.deterministic_trace.failure_time)
    result.deterministic_trace.write_csv(out_dir / "trace_mean.csv")
    logger.info("Wrote eval_summary.csv, eval_metrics.csv and %d traces to %s", len(result.traces) + 1, out_dir)


def cmd_train(args):
    cfg = resolve_config(args)
    run_training(cfg, cfg.resolved_output_dir(), progress=args.progress)
    return EXIT_OK


def cmd_eval(args):
    cfg = resolve_config(args)
    theta, metadata = load_checkpoint(args.checkpoint)
    logger.info("Loaded policy from %s (%s)", args.checkpoint, metadata)
    result = evaluate(theta, cfg.scenario, args.n_eval, cfg.train.master_seed, cfg.model,
                      deterministic=args.deterministic)
    out_dir = Path(args.eval_dir) if args.eval_dir else cfg.resolved_output_dir() / "eval"
    write_evaluation(result, out_dir)
    return EXIT_OK


def cmd_dose_response(args):
    params = load_run_config(args.config).model if args.config else RunConfig().model
    table = dose_response_table(args.n_points, params)
    write_dose_response_csv(table, args.output)
    return EXIT_OK


def cmd_sweep(args):
    base = resolve_config(args)
    root = base.resolved_output_dir()
    rows = []
    for level in UNCERTAINTY_LEVELS:
        cfg = apply_overrides(base, [f"scenario.uncertainty_level={level}", f"label={json.dumps(f'{base.label}_unc_{level:g}')}"])
        out_dir = root / f"unc_{level:g}"
        logger.info("Sweep: uncertainty level %g -> %s", level, out_dir)
        trained = run_training(cfg, out_dir, progress=args.progress)
        result = evaluate(trained.best_params, cfg.scenario, args.n_eval, cfg.train.master_seed, cfg.model)
        write_evaluation(result, out_dir / "eval")
        rows.append({
            "uncertainty_level": level,
            "best_epoch": trained.best_epoch,
            "best_mean_return": trained.best_mean_return,
            "eval_mean_return": result.mean_return,
            "eval_sd_return": result.sd_return,
            "continuous_cost": result.continuous_cost,
        })
    pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(root / "sweep_summary.csv", index=False, lineterminator="\n")
    return EXIT_OK


def _add_config_options(parser):
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config field by dotted path, e.g. scenario.uncertainty_level=0.05")
    parser.add_argument("--scenario", choices=["pwm", "intensity"], help="actuation mode")
    parser.add_argument("--uncertainty", type=float, help="relative standard deviation of the plant uncertainty")
    parser.add_argument("--epochs", type=int, help="maximum number of training epochs")
    parser.add_argument("--mc", type=int, help="Monte Carlo rollouts per epoch")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--output-dir", dest="output_dir", help="output directory (default <output root>/<label>)")
    parser.add_argument("--label", help="run label")


def build_parser():
    parser = argparse.ArgumentParser(
        description="PWM optogenetic chemostat control trained with policy gradients",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy")
    _add_config_options(p_train)
    p_train.add_argument("--progress", action="store_true", help="show a progress bar")
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a trained policy")
    _add_config_options(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="policy checkpoint to evaluate")
    p_eval.add_argument("--n-eval", dest="n_eval", type=int, default=20, help="evaluation episodes")
    p_eval.add_argument("--deterministic", action="store_true", help="apply the policy mean instead of sampling")
    p_eval.add_argument("--eval-dir", dest="eval_dir", help="output directory (default <output dir>/eval)")
    p_eval.set_defaults(handler=cmd_eval)

    p_dose = sub.add_parser("dose-response", help="export the normalized dose-response table")
    p_dose.add_argument("--config", help="JSON run configuration (model parameters)")
    p_dose.add_argument("--n-points", dest="n_points", type=int, default=101, help="grid points per mode")
    p_dose.add_argument("--output", default="dose_response.csv", help="CSV output path")
    p_dose.set_defaults(handler=cmd_dose_response)

    p_sweep = sub.add_parser("sweep", help="train and evaluate at 0, 2.5, 5 and 7.5 %% uncertainty")
    _add_config_options(p_sweep)
    p_sweep.add_argument("--n-eval", dest="n_eval", type=int, default=200, help="evaluation episodes per level")
    p_sweep.add_argument("--progress", action="store_true", help="show a progress bar")
    p_sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    try:
        return args.handler(args)
    except (ConfigError, CheckpointError, ScenarioError, DomainError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except OSError as e:
        logger.error("cannot write output: %s", e)
        return EXIT_INVALID
    except TrainingAborted as e:
        logger.error("training aborted: %s", e)
        return EXIT_ABORTED
    except EpisodeFailure as e:
        logger.error("evaluation failed: %s", e)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
