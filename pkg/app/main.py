"""
Command-line entry point.

Usage:
    python -m app.main train --config configs/cue_recall.env --seed 0 --out runs/seed0
    python -m app.main eval --checkpoint runs/seed0/checkpoint.safetensors --episodes 5
    python -m app.main summarize runs/seed*/metrics.csv --threshold 0.8
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional

import torch

from app.checkpoint import load_checkpoint
from app.core.config import RunConfig, load_run_config, settings
from app.core.errors import CoBERLError, InputError
from app.core.logging import configure_logging
from app.envs import make_env
from app.harness.evaluator import evaluate
from app.harness.trainer import Trainer
from app.metrics import summarize_run
from app.models.coberl import build_network

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coberl", description=f"{settings.PROJECT_NAME} {settings.VERSION}")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="Logging level (default from LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train an agent and write metrics.csv and a checkpoint")
    train.add_argument("--config", type=Path, help="Flat key=value run config (default: desk preset)")
    train.add_argument("--seed", type=int, help="Overrides harness.seed")
    train.add_argument("--out", type=Path, help=f"Output directory (default: {settings.OUTPUT_DIR}/seed<N>)")
    train.add_argument("--async", dest="use_async", action="store_true", help="Run actors as asyncio tasks")

    evaluate_cmd = commands.add_parser("eval", help="Evaluate a checkpoint")
    evaluate_cmd.add_argument("--checkpoint", type=Path, required=True)
    evaluate_cmd.add_argument("--episodes", type=int, default=5)
    evaluate_cmd.add_argument("--epsilon", type=float, help="Defaults to harness.eval_epsilon")
    evaluate_cmd.add_argument("--seed", type=int, default=0)

    summarize = commands.add_parser("summarize", help="Summarize metrics CSVs across seeds")
    summarize.add_argument("csv", type=Path, nargs="+")
    summarize.add_argument("--budget", type=int, help="Environment-step budget for the final 5%% window")
    summarize.add_argument("--threshold", type=float, help="Also report AUC above this return")
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config) if args.config else RunConfig.desk()
    seed = config.harness.seed if args.seed is None else args.seed
    if config.harness.mode == "async":
        args.use_async = True
    out_dir = args.out or Path(settings.OUTPUT_DIR) / f"seed{seed}"

    trainer = Trainer(config, seed=seed, out_dir=out_dir)
    result = asyncio.run(trainer.run_async()) if args.use_async else trainer.run()
    print(f"final_mean={result.final_mean}")
    print(f"env_steps={result.env_steps}")
    print(f"learner_steps={result.learner_steps}")
    print(f"metrics={result.metrics_path}")
    print(f"checkpoint={result.checkpoint_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.config
    if config is None:
        raise InputError(f"{args.checkpoint} carries no run config")

    env = make_env(config.env, args.seed)
    network = build_network(config, env.n_actions)
    checkpoint.parameters().load_into(network)
    epsilon = config.harness.eval_epsilon if args.epsilon is None else args.epsilon
    mean, returns = evaluate(network, env, args.episodes, epsilon, seed=args.seed)
    print(f"mean_return={mean}")
    print(f"returns={','.join(f'{r:g}' for r in returns)}")
    print(f"parameter_version={checkpoint.parameter_version}")
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    summary = summarize_run(args.csv, budget=args.budget, threshold=args.threshold)
    print(summary.to_text())
    print()
    print(summary.to_key_values())
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "summarize": cmd_summarize}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, settings.LOG_FORMAT)
    torch.set_num_threads(settings.TORCH_THREADS)
    try:
        return COMMANDS[args.command](args)
    except CoBERLError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
