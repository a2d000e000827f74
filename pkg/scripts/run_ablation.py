"""
Ablation runner - trains architecture and auxiliary-loss variants over several
seeds and compares their learning-curve AUC against the full agent.

Each variant x seed writes runs/<variant>/seed<N>/metrics.csv; the summary
reports median AUC per variant and, per variant, on how many paired seeds the
full agent's AUC is at least as high.

Usage:
    python scripts/run_ablation.py --config configs/cue_recall.env --seeds 5
    python scripts/run_ablation.py --variants coberl no_aux --seeds 2 --steps 20000
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.core.config import RunConfig, load_run_config, settings
from app.core.errors import CoBERLError
from app.core.logging import configure_logging
from app.harness.trainer import Trainer
from app.metrics import paired_wins, summarize_run

VARIANTS: dict[str, dict[str, dict]] = {
    "coberl": {},
    "no_aux": {"contrastive": {"enabled": False}},
    "no_masking": {"contrastive": {"masking": False}},
    "no_gate": {"core": {"gate": "none"}},
    "sum_gate": {"core": {"gate": "sum"}},
    "concat_gate": {"core": {"gate": "concat"}},
    "no_lstm": {"core": {"use_lstm": False}},
}


def run_variant(name: str, config: RunConfig, seeds: list[int], out_root: Path) -> dict[str, float]:
    """Train one variant on every seed; returns seed -> AUC."""
    aucs = {}
    paths = []
    for seed in seeds:
        out_dir = out_root / name / f"seed{seed}"
        start = time.time()
        result = Trainer(config, seed=seed, out_dir=out_dir).run()
        paths.append(result.metrics_path)
        print(f"  [{name}] seed {seed}: final={result.final_mean:.3f} ({time.time() - start:.0f}s)")

    summary = summarize_run(paths, budget=config.harness.total_env_steps)
    for seed_summary in summary.seeds:
        if seed_summary.auc is not None:
            aucs[seed_summary.seed] = seed_summary.auc
    return aucs


def main():
    """Main entry point"""
    parser = argparse.ArgumentParser(description="Compare CoBERL variants across seeds")
    parser.add_argument("--config", type=Path, help="Base run config (default: desk preset)")
    parser.add_argument("--variants", nargs="+", default=["coberl", "no_aux", "no_gate"], choices=sorted(VARIANTS))
    parser.add_argument("--seeds", type=int, default=5, help="Number of seeds (default: 5)")
    parser.add_argument("--steps", type=int, help="Override harness.total_env_steps")
    parser.add_argument("--out", type=Path, default=Path(settings.OUTPUT_DIR) / "ablation")
    args = parser.parse_args()

    configure_logging("WARNING", settings.LOG_FORMAT)
    try:
        base = load_run_config(args.config) if args.config else RunConfig.desk()
        if args.steps:
            base = base.override(harness={"total_env_steps": args.steps})
    except CoBERLError as e:
        print(f"[ERROR] {e}")
        sys.exit(2)

    seeds = list(range(args.seeds))
    print(f"\nCoBERL ablation")
    print("=" * 60)
    print(f"Variants: {', '.join(args.variants)}")
    print(f"Seeds: {len(seeds)}")
    print(f"Env steps per run: {base.harness.total_env_steps}")
    print("=" * 60)

    results: dict[str, dict[str, float]] = {}
    for name in args.variants:
        config = base.override(**VARIANTS[name]) if VARIANTS[name] else base
        print(f"\nRunning {name}...")
        results[name] = run_variant(name, config, seeds, args.out)

    print()
    print("=" * 60)
    print("Results (AUC of eval return)")
    print("=" * 60)
    for name, aucs in results.items():
        median = float(np.median(list(aucs.values()))) if aucs else float("nan")
        print(f"  {name:<12} median AUC: {median:.2f}")

    if "coberl" in results:
        print()
        for name, aucs in results.items():
            if name == "coberl":
                continue
            wins, total = paired_wins(results["coberl"], aucs)
            print(f"  coberl >= {name}: {wins}/{total} paired seeds")
    print("=" * 60)


if __name__ == "__main__":
    main()
