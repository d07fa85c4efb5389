"""Per-status F1 on unseen symptoms (BySymptom split) versus the random split, gold symptoms given.

    python scripts/run_cross_symptom.py --out runs/cross_symptom.json [--config cfg.json]
"""

import argparse
import json
import logging
from pathlib import Path

from knse.cli import load_config
from knse.experiments import run_cross_symptom


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON ExperimentConfig")
    ap.add_argument("--out", default="runs/cross_symptom.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    res = run_cross_symptom(load_config(args.config))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res, indent=2))
    print(json.dumps(res, indent=2))
    worst = max(res["per_status_drop"].values())
    print(f"largest per-status drop {100 * worst:.1f} points:", "PASS" if worst <= 0.15 else "FAIL")


if __name__ == "__main__":
    main()
