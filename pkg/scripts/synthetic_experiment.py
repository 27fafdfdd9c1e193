"""Synthetic end-to-end experiment: 48 train / 16 eval pairs at 128x128.

    python scripts/synthetic_experiment.py --workdir runs/synth --seed 0
"""
import argparse
import json

from msmatch.config import experiment_config, load_config
from msmatch.experiment import run_synthetic_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default="runs/synth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="override the built-in experiment config")
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    cfg = load_config(args.config) if args.config else experiment_config(args.seed)
    cfg.seed = args.seed
    if args.steps:
        cfg.train.steps = args.steps
    summary = run_synthetic_experiment(args.workdir, cfg, workers=args.workers)
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
