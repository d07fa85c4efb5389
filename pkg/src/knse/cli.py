"""``knse`` command-line entry point.

Every subcommand reads an optional JSON :class:`ExperimentConfig` (``--config``), applies flag
overrides on top (flags win), writes its artifacts under ``--out`` and finishes with a
``manifest.json`` holding the resolved config, its hash, the seeds and a digest of every output.

Exit codes: 0 success, 1 runtime failure, 2 missing file, 3 config validation failure, 64 bad
command line. Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import torch

from . import experiments as ex
from .corpus import (SplitMode, Status, SymptomCatalog, corpus_windows, load_corpus, make_cross_domain_split,
                     split_symptoms, write_jsonl)
from .experiments import ConfigError
from .pipeline import SERPipeline, WindowPrediction, evaluate_predictions, predict_corpus
from .prompts import HTTPProvider, KnowledgeStore, StaticProvider, populate_knowledge
from .synthetic import generate_synthetic_corpus, synthetic_catalog, synthetic_knowledge
from .training import StatusClassifier

logger = logging.getLogger("knse")

EXIT_RUNTIME, EXIT_MISSING, EXIT_CONFIG, EXIT_USAGE = 1, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config handling

def load_config(path: str | None) -> ex.ExperimentConfig:
    if path is None:
        return ex.ExperimentConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p}: invalid JSON ({e})") from None
    try:
        return ex.ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def apply_overrides(cfg: ex.ExperimentConfig, overrides: dict) -> ex.ExperimentConfig:
    """Set dotted ``section.field`` values on a copy of ``cfg``."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        if leaf not in node:
            raise ConfigError(f"{dotted}: no such config field")
        node[leaf] = list(value) if isinstance(value, tuple) else value
    try:
        return ex.ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv: list[str], cfg: ex.ExperimentConfig, extra: dict | None = None):
    outputs = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            outputs[str(f.relative_to(out))] = _digest_file(f)
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seeds": {"generator": cfg.generator.seed, "split": cfg.split.seed, "train": cfg.train.seed,
                  "ser_train": cfg.ser_train.seed, "model": cfg.model_seed},
        "torch": torch.__version__,
        "outputs": outputs,
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg, out: Path, args) -> dict:
    corpus = generate_synthetic_corpus(cfg.generator)
    catalog = synthetic_catalog(cfg.generator)
    write_jsonl(corpus, out / "corpus.jsonl")
    catalog.save(out / "catalog.json")
    _dump(out / "knowledge.json", synthetic_knowledge(catalog))
    return {"dialogues": len(corpus), "symptoms": len(catalog)}


def cmd_windows(cfg, out: Path, args) -> dict:
    dialogues = load_corpus(ex.require_path(cfg.paths.corpus, "corpus"), cfg.paths.corpus_format)
    windows = corpus_windows(dialogues, cfg.window)
    with open(out / "windows.jsonl", "w", encoding="utf-8") as fh:
        for w in windows:
            fh.write(json.dumps({"id": w.id, "dialogue": w.dialogue_id, "end": w.end,
                                 "utterances": [u.index for u in w.utterances],
                                 "gold": sorted([s, st.value] for s, st in w.gold)}, ensure_ascii=False) + "\n")
    return {"windows": len(windows)}


def cmd_split(cfg, out: Path, args) -> dict:
    dialogues = load_corpus(ex.require_path(cfg.paths.corpus, "corpus"), cfg.paths.corpus_format)
    parts = make_cross_domain_split(dialogues, cfg.split)
    for name, part in zip(("train", "dev", "test"), parts):
        write_jsonl(part, out / f"{name}.jsonl")
    summary = {name: {"dialogues": len(part), "symptoms": sorted(syms)}
               for name, part, syms in zip(("train", "dev", "test"), parts, split_symptoms(parts))}
    _dump(out / "split.json", summary)
    return {name: v["dialogues"] for name, v in summary.items()}


def cmd_knowledge(cfg, out: Path, args) -> dict:
    catalog = SymptomCatalog.load(ex.require_path(cfg.paths.catalog, "catalog"))
    store = KnowledgeStore.load(ex.require_path(cfg.paths.knowledge, "knowledge")) if cfg.paths.knowledge \
        else KnowledgeStore()
    if args.provider == "http":
        if not args.endpoint:
            raise ConfigError("--endpoint is required with --provider http")
        provider = HTTPProvider(args.endpoint, args.token_env, args.timeout)
    else:
        if not args.static_file:
            raise ConfigError("--static-file is required with --provider static")
        provider = StaticProvider.from_file(ex.require_path(args.static_file, "static_file"))
    store, report = populate_knowledge(catalog, store, provider)
    store.save(out / "knowledge.json")
    _dump(out / "knowledge_report.json", dataclasses.asdict(report))
    return {"requested": report.requested, "filled": report.filled, "errors": len(report.errors)}


def cmd_train_ser(cfg, out: Path, args) -> dict:
    data = ex.load_data(cfg)
    ser, info = ex.train_ser_model(cfg, data)
    ser.save(out / "ser")
    _dump(out / "results.json", info)
    return info


def cmd_train_ssr(cfg, out: Path, args) -> dict:
    data = ex.load_data(cfg)
    clf, res = ex.train_ssr_model(cfg, data, log_path=out / "train_log.jsonl")
    clf.save(out / "ssr")
    info = {"dev_f1": res.best_dev_f1, "best_epoch": res.best_epoch, "ssr_digest": ex.state_digest(clf.model)}
    _dump(out / "results.json", info)
    return info


def cmd_predict(cfg, out: Path, args) -> dict:
    dialogues = load_corpus(ex.require_path(cfg.paths.corpus, "corpus"), cfg.paths.corpus_format)
    clf = StatusClassifier.load(ex.require_path(cfg.paths.ssr_checkpoint, "ssr_checkpoint"))
    ser = None
    if not args.gold_symptoms:
        ser = SERPipeline.load(ex.require_path(cfg.paths.ser_checkpoint, "ser_checkpoint"))
    preds = predict_corpus(dialogues, cfg.window, clf, ser, gold_symptoms=args.gold_symptoms)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")
    return {"windows": len(preds), "pairs": sum(len(p.pairs) for p in preds)}


def read_predictions(path: Path) -> list[WindowPrediction]:
    preds = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                preds.append(WindowPrediction(r["window"], r["dialogue"],
                                              frozenset((s, Status(st)) for s, st in r["pairs"])))
    return preds


def cmd_evaluate(cfg, out: Path, args) -> dict:
    dialogues = load_corpus(ex.require_path(cfg.paths.corpus, "corpus"), cfg.paths.corpus_format)
    preds = read_predictions(ex.require_path(cfg.paths.predictions, "predictions"))
    report = evaluate_predictions(preds, dialogues, cfg.window, args.level)
    _dump(out / f"metrics_{args.level}.json", report.to_json())
    return report.to_json()


def cmd_ablate(cfg, out: Path, args) -> dict:
    data = ex.load_data(cfg, need_test=True)
    table = ex.run_ablations(cfg, args.variants, out_dir=out, data=data)
    _dump(out / "ablation.json", table)
    lines = ["| variant | dev F1 | test F1 |", "|---|---|---|"]
    lines += [f"| {k} | {v['dev_f1']:.4f} | {v['test_f1']:.4f} |" for k, v in table.items()]
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    return table


# ---------------------------------------------------------------------------
# argument parsing

def _opt(p, flag, dest, **kw):
    """Config-override flag: stored under ``cfg:<dotted path>`` only when given."""
    p.add_argument(flag, dest=f"cfg:{dest}", default=argparse.SUPPRESS, **kw)


def _split_ratios(text: str) -> tuple:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)


def _train_flags(p, section: str = "train"):
    _opt(p, "--epochs", f"{section}.epochs", type=int, help="training epochs")
    _opt(p, "--lr", f"{section}.learning_rate", type=float, help="AdamW learning rate")
    _opt(p, "--batch-size", f"{section}.batch_size", type=int, help="mini-batch size")
    _opt(p, "--train-seed", f"{section}.seed", type=int, help="shuffle/dropout seed")


def _ssr_flags(p):
    _opt(p, "--prompt-mode", "ssr.prompt_mode", choices=["soft", "hard"], help="hypothesis prompt type")
    _opt(p, "--no-knowledge", "ssr.use_knowledge", action="store_const", const=False,
         help="drop the knowledge segment")
    _opt(p, "--matcher-mode", "ssr.matcher_mode", choices=["full", "encoder_only"], help="classifier head")
    _opt(p, "--swap-rate", "swap_rate", type=float, help="symptom-swap augmentation probability per window")
    _opt(p, "--nonce-symptoms", "nonce_symptoms", type=int, help="placeholder symptoms in the swap pool")
    _opt(p, "--model-seed", "model_seed", type=int, help="parameter initialization seed")


def _data_flags(p, *names):
    helps = {"corpus": "dialogue corpus file", "catalog": "symptom catalog JSON", "knowledge": "knowledge cache JSON",
             "train": "train split", "dev": "dev split", "test": "test split"}
    for n in names:
        _opt(p, f"--{n}", f"paths.{n}", help=helps[n])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="knse", description="Knowledge-aware symptom status recognition experiments.",
                     allow_abbrev=False)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help, description=help, allow_abbrev=False)
        p.add_argument("--config", help="JSON experiment config; flags override it")
        _opt(p, "--out", "paths.out", help="output directory (all artifacts go here)")
        _opt(p, "--corpus-format", "paths.corpus_format", choices=["jsonl", "cmdd_json"], help="corpus file format")
        p.set_defaults(fn=fn)
        return p

    p = command("synth", cmd_synth, "generate a synthetic corpus, catalog and knowledge cache")
    _opt(p, "--seed", "generator.seed", type=int, help="generator seed")
    _opt(p, "--num-dialogues", "generator.num_dialogues", type=int, help="number of dialogues")
    _opt(p, "--catalog-size", "generator.catalog_size", type=int, help="number of symptoms")
    _opt(p, "--cross-utterance-rate", "generator.cross_utterance_rate", type=float,
         help="share of mentions whose status is given in a later utterance")

    p = command("windows", cmd_windows, "write sliding windows with their gold pairs")
    _data_flags(p, "corpus")
    _opt(p, "--window", "window", type=int, help="window length in utterances")

    p = command("split", cmd_split, "partition a corpus into train/dev/test")
    _data_flags(p, "corpus")
    _opt(p, "--mode", "split.mode", choices=[m.value for m in SplitMode], help="split protocol")
    _opt(p, "--ratios", "split.ratios", type=_split_ratios, help="train,dev,test fractions")
    _opt(p, "--split-seed", "split.seed", type=int, help="split seed")

    p = command("knowledge", cmd_knowledge, "fill the knowledge cache for every catalog symptom")
    _data_flags(p, "catalog", "knowledge")
    p.add_argument("--provider", choices=["static", "http"], default="static", help="knowledge source")
    p.add_argument("--static-file", help="JSON {symptom: description} for the static provider")
    p.add_argument("--endpoint", help="URL of the text-generation endpoint")
    p.add_argument("--token-env", default="KNSE_PROVIDER_TOKEN", help="env var holding the bearer token")
    p.add_argument("--timeout", type=float, default=30.0, help="HTTP timeout in seconds")

    p = command("train-ser", cmd_train_ser, "train the symptom tagger and the name standardizer")
    _data_flags(p, "catalog", "knowledge", "train", "dev")
    _train_flags(p, "ser_train")
    _opt(p, "--model-seed", "model_seed", type=int, help="parameter initialization seed")

    p = command("train-ssr", cmd_train_ssr, "train the status classifier")
    _data_flags(p, "catalog", "knowledge", "train", "dev")
    _train_flags(p)
    _ssr_flags(p)

    p = command("predict", cmd_predict, "predict (symptom, status) pairs for every window")
    _data_flags(p, "corpus")
    _opt(p, "--ssr-checkpoint", "paths.ssr_checkpoint", help="status classifier directory")
    _opt(p, "--ser-checkpoint", "paths.ser_checkpoint", help="symptom tagger directory")
    _opt(p, "--window", "window", type=int, help="window length in utterances")
    p.add_argument("--gold-symptoms", action="store_true", help="query the gold symptoms instead of running SER")

    p = command("evaluate", cmd_evaluate, "score predictions against the corpus gold")
    _data_flags(p, "corpus")
    _opt(p, "--predictions", "paths.predictions", help="predictions JSONL from 'predict'")
    _opt(p, "--window", "window", type=int, help="window length in utterances")
    p.add_argument("--level", choices=["window", "dialogue"], default="window", help="evaluation granularity")

    p = command("ablate", cmd_ablate, "train and compare the full model and its ablations")
    _data_flags(p, "catalog", "knowledge", "train", "dev", "test")
    _train_flags(p)
    _opt(p, "--swap-rate", "swap_rate", type=float, help="symptom-swap augmentation probability per window")
    _opt(p, "--nonce-symptoms", "nonce_symptoms", type=int, help="placeholder symptoms in the swap pool")
    _opt(p, "--model-seed", "model_seed", type=int, help="parameter initialization seed")
    p.add_argument("--variants", nargs="+", default=list(ex.ABLATIONS), choices=list(ex.ABLATIONS),
                   help="variants to run")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
        cfg = apply_overrides(cfg, overrides)
        try:
            cfg.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        out = Path(cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = args.fn(cfg, out, args)
        write_manifest(out, args.command, argv, cfg, {"summary": summary})
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING, "missing_file", str(e))
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except Exception as e:  # anything else is a runtime failure
        logger.debug("runtime failure", exc_info=True)
        return _fail(EXIT_RUNTIME, type(e).__name__, str(e))
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
