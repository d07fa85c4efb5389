"""Full model versus encoder-only, hard-prompt and no-knowledge variants on the synthetic corpus.

    python scripts/run_ablations.py --out runs/ablations [--variants full encoder_only]
"""

import argparse
import json
import logging
from pathlib import Path

from knse.cli import load_config
from knse.experiments import ABLATIONS, run_ablations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON ExperimentConfig")
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--variants", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_ablations(load_config(args.config), args.variants, out)
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    for name, row in table.items():
        print(f"{name:14s} dev F1 {row['dev_f1']:.4f}  test F1 {row['test_f1']:.4f}")


if __name__ == "__main__":
    main()
