"""Train SER + SSR on the synthetic corpus and report test window/dialogue F1 (acceptance criterion 6).

    python scripts/run_synthetic_experiment.py --out runs/synthetic [--config cfg.json] [--no-encoder-only]
"""

import argparse
import json
import logging

from knse.cli import load_config
from knse.experiments import run_synthetic_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON ExperimentConfig (defaults: 500 dialogues, 20 symptoms, seed 42)")
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--no-encoder-only", action="store_true", help="skip the encoder-only dev comparison")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config)
    res = run_synthetic_experiment(cfg, args.out, with_encoder_only=not args.no_encoder_only)
    res.pop("test_gold_report", None)
    print(json.dumps(res, indent=2))
    ok = res["test_window"]["f1"] >= 0.90
    if "encoder_only_dev_f1" in res:
        ok &= res["full_dev_f1"] >= res["encoder_only_dev_f1"]
    print("criterion 6:", "PASS" if ok else "FAIL")


if __name__ == "__main__":
    main()
