"""
Actor fleet simulator - runs actors, batched inference and the learner as
concurrent asyncio tasks against one replay buffer and prints fleet statistics.

Usage:
    python scripts/simulate_actors.py --actors 8 --steps 4000
    python scripts/simulate_actors.py --config configs/cue_recall.env --actors 4
"""

import argparse
import asyncio
import sys
import time
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.core.config import RunConfig, load_run_config, settings
from app.core.logging import configure_logging
from app.harness.trainer import Trainer


async def run_simulation(config: RunConfig, seed: int) -> None:
    """Run one asynchronous training session and report per-actor statistics."""
    trainer = Trainer(config, seed=seed)
    harness = config.harness

    print(f"Starting simulation...")
    print(f"  Actors: {harness.num_actors}")
    print(f"  Inference batch: {harness.inference_batch_size}")
    print(f"  Env steps: {harness.total_env_steps}\n")

    start_time = time.time()
    result = await trainer.run_async()
    total_time = time.time() - start_time

    print("\nActors:")
    for actor in trainer.actors:
        print(
            f"  [actor-{actor.index:03d}] epsilon={actor.epsilon:.5f} "
            f"steps={actor.steps} episodes={actor.episodes} dropped_sequences={actor.builder.dropped}"
        )

    print("\nStatistics:")
    print(f"  Env steps: {result.env_steps}")
    print(f"  Throughput: {result.env_steps / total_time:.1f} steps/sec")
    print(f"  Inference batches: {trainer.inference.batches_served}")
    print(f"  Mean batch size: {result.env_steps / max(trainer.inference.batches_served, 1):.2f}")
    print(f"  Learner steps: {result.learner_steps}")
    print(f"  Replay sequences: {len(trainer.replay)} (stale priority updates: {trainer.replay.stale_updates})")
    print(f"  Final-window eval return: {result.final_mean:.3f}")


def main():
    """Main function."""
    parser = argparse.ArgumentParser(description="Simulate an asynchronous actor fleet")
    parser.add_argument("--config", type=Path, help="Run config (default: desk preset)")
    parser.add_argument("--actors", type=int, default=8, help="Number of actors (default: 8)")
    parser.add_argument("--steps", type=int, default=4000, help="Environment steps (default: 4000)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    configure_logging(settings.LOG_LEVEL, settings.LOG_FORMAT)
    base = load_run_config(args.config) if args.config else RunConfig.desk()
    config = base.override(
        harness={
            "mode": "async",
            "num_actors": args.actors,
            "total_env_steps": args.steps,
            "eval_interval": max(args.steps // 10, 1),
        }
    )

    print("=" * 60)
    print("CoBERL Actor Fleet Simulator")
    print("=" * 60)
    asyncio.run(run_simulation(config, args.seed))


if __name__ == "__main__":
    main()
