"""Experiment wiring: corpus -> vocab -> SER + SSR training -> pipeline evaluation.

Everything here is deterministic under the seeds held in :class:`ExperimentConfig`; the acceptance
suite and the scripts in ``scripts/`` both go through these functions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import torch

from .corpus import (STATUSES, Dialogue, SplitMode, SplitSpec, SymptomCatalog, corpus_windows, load_corpus,
                     make_cross_domain_split)
from .encoder import EncoderConfig, Vocab
from .metrics import MetricsReport
from .pipeline import SERPipeline, evaluate_predictions, predict_corpus
from .prompts import FALLBACK_TEMPLATE, HARD_TEMPLATE, KnowledgeStore
from .ser import SERTagger, ser_examples, train_standardizer
from .synthetic import GeneratorConfig, generate_synthetic_corpus, synthetic_catalog, synthetic_knowledge
from .training import (SSRSettings, StatusClassifier, SymptomSwap, TrainConfig, evaluate_known_symptoms,
                       nonce_symptoms, ssr_examples, train_ser, train_ssr)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration; the message starts with the field path."""


def _ssr_train_default() -> TrainConfig:
    return TrainConfig(batch_size=16, learning_rate=1e-3, epochs=40)


def _ser_train_default() -> TrainConfig:
    return TrainConfig(batch_size=32, learning_rate=1e-3, epochs=6)


@dataclass
class PathsConfig:
    """File locations used by the command-line tools. Inputs resolve against the working directory;
    every output goes under ``out``."""

    corpus: str | None = None
    corpus_format: str = "jsonl"
    catalog: str | None = None
    knowledge: str | None = None
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    ser_checkpoint: str | None = None
    ssr_checkpoint: str | None = None
    predictions: str | None = None
    out: str = "runs/default"


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(num_dialogues=500, catalog_size=20,
                                                                              seed=42, cross_utterance_rate=0.5))
    split: SplitSpec = field(default_factory=lambda: SplitSpec(SplitMode.RANDOM, (0.6, 0.2, 0.2), 42))
    window: int = 5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssr: SSRSettings = field(default_factory=SSRSettings)
    train: TrainConfig = field(default_factory=_ssr_train_default)
    ser_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(layers=1))
    ser_train: TrainConfig = field(default_factory=_ser_train_default)
    swap_rate: float = 0.5
    # placeholder symptoms added to the swap pool (0 disables them)
    nonce_symptoms: int = 300
    standardizer_augment: int = 8
    model_seed: int = 0

    def validate(self) -> None:
        """Raise ``ValueError`` whose message starts with the offending field path."""
        for name in ("generator", "encoder", "ser_encoder", "ssr", "train", "ser_train"):
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ValueError(f"{name}: {e}") from None
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.swap_rate <= 1.0:
            raise ValueError("swap_rate must be in [0, 1]")
        if self.nonce_symptoms < 0:
            raise ValueError("nonce_symptoms must be >= 0")
        if self.paths.corpus_format not in ("jsonl", "cmdd_json"):
            raise ValueError(f"paths.corpus_format must be 'jsonl' or 'cmdd_json', got {self.paths.corpus_format!r}")

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _from_jsonable(cls, data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(x) for x in obj]
    if hasattr(obj, "value") and isinstance(obj, str):
        return obj.value
    return obj


def _from_jsonable(cls, data: dict):
    """Rebuild a (nested) dataclass; unknown keys raise ``ValueError`` naming the field path."""
    if not isinstance(data, dict):
        raise ValueError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown field(s) {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            try:
                kwargs[name] = _from_jsonable(type(current), value)
            except ValueError as exc:
                raise ValueError(f"{name}.{exc}") from None
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, SplitMode):
            kwargs[name] = SplitMode(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Data

@dataclass
class ExperimentData:
    corpus: list[Dialogue]
    catalog: SymptomCatalog
    store: KnowledgeStore
    train: list[Dialogue]
    dev: list[Dialogue]
    test: list[Dialogue]
    vocab: Vocab


def build_vocab(dialogues: Sequence[Dialogue], catalog: SymptomCatalog, store: KnowledgeStore,
                prompt_prefix: int, prompt_suffix: int, extra_symptoms: Sequence[str] = ()) -> Vocab:
    """Vocabulary over dialogue text, catalog names/aliases, knowledge texts and the hard template.

    ``extra_symptoms`` (nonce placeholders) contribute their names and fallback descriptions.
    """
    texts = [u.text for d in dialogues for u in d.utterances]
    texts += list(catalog.entries) + list(catalog.aliases) + [store.text(c) for c in catalog.entries]
    texts.append(HARD_TEMPLATE)
    texts += [FALLBACK_TEMPLATE.format(s) for s in extra_symptoms]
    return Vocab.build(texts, prompt_prefix, prompt_suffix)


def _extra_symptoms(cfg: "ExperimentConfig") -> list[str]:
    return nonce_symptoms(cfg.nonce_symptoms) if cfg.swap_rate > 0 else []


def prepare_data(cfg: ExperimentConfig, split: SplitSpec | None = None) -> ExperimentData:
    corpus = generate_synthetic_corpus(cfg.generator)
    catalog = synthetic_catalog(cfg.generator)
    store = KnowledgeStore(synthetic_knowledge(catalog))
    train, dev, test = make_cross_domain_split(corpus, split or cfg.split)
    # test text never enters the vocabulary; unseen test tokens map to [UNK]
    vocab = build_vocab(list(train) + list(dev), catalog, store, cfg.ssr.prompt_prefix, cfg.ssr.prompt_suffix,
                        _extra_symptoms(cfg))
    return ExperimentData(corpus, catalog, store, list(train), list(dev), list(test), vocab)


def require_path(value: str | None, name: str) -> Path:
    if not value:
        raise ConfigError(f"paths.{name} is required for this command")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"paths.{name}: {path} does not exist")
    return path


def load_data(cfg: ExperimentConfig, need_test: bool = False) -> ExperimentData:
    """Splits, catalog and knowledge cache from the files named in ``cfg.paths``."""
    p = cfg.paths
    catalog = SymptomCatalog.load(require_path(p.catalog, "catalog"))
    store = KnowledgeStore.load(require_path(p.knowledge, "knowledge")) if p.knowledge else KnowledgeStore()
    if p.knowledge is None:
        logger.warning("no knowledge cache given; every symptom uses the fallback description")
    train = load_corpus(require_path(p.train, "train"), p.corpus_format, catalog)
    dev = load_corpus(require_path(p.dev, "dev"), p.corpus_format, catalog)
    test = load_corpus(require_path(p.test, "test"), p.corpus_format, catalog) if need_test else []
    vocab = build_vocab(train + dev, catalog, store, cfg.ssr.prompt_prefix, cfg.ssr.prompt_suffix,
                        _extra_symptoms(cfg))
    return ExperimentData(train + dev + test, catalog, store, train, dev, test, vocab)


# ---------------------------------------------------------------------------
# Training

def train_ssr_model(cfg: ExperimentConfig, data: ExperimentData, settings: SSRSettings | None = None,
                    log_path=None):
    settings = settings or cfg.ssr
    clf = StatusClassifier.create(data.vocab, data.store, cfg.encoder, settings, seed=cfg.model_seed)
    train_x = ssr_examples(corpus_windows(data.train, cfg.window), clf)
    dev_x = ssr_examples(corpus_windows(data.dev, cfg.window), clf)
    augment = None
    if cfg.swap_rate > 0:
        augment = SymptomSwap.from_dialogues(data.train, data.catalog, cfg.swap_rate, cfg.nonce_symptoms)
    result = train_ssr(clf, train_x, dev_x, cfg.train, log_path, augment=augment)
    return clf, result


def train_ser_model(cfg: ExperimentConfig, data: ExperimentData) -> tuple[SERPipeline, dict]:
    max_len = cfg.ser_encoder.max_utt_len
    torch.manual_seed(cfg.model_seed)
    tagger = SERTagger(len(data.vocab), cfg.ser_encoder, max_len)
    train_x = ser_examples(data.train, data.vocab, max_len)
    dev_x = ser_examples(data.dev, data.vocab, max_len)
    result = train_ser(tagger, train_x, dev_x, cfg.ser_train)
    standardizer = train_standardizer(data.catalog, augment=cfg.standardizer_augment, seed=cfg.model_seed)
    return SERPipeline(tagger, data.vocab, standardizer, max_len), {"ser_dev_span_f1": result.best_dev_f1,
                                                                      "ser_best_epoch": result.best_epoch}


def state_digest(module: torch.nn.Module) -> str:
    """SHA-256 over every tensor's name and raw bytes, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def gold_symptom_report(clf: StatusClassifier, dialogues: Sequence[Dialogue], n: int):
    examples = ssr_examples(corpus_windows(dialogues, n), clf)
    report, _ = evaluate_known_symptoms(clf, examples)
    return report


# ---------------------------------------------------------------------------
# Experiments

def run_synthetic_experiment(cfg: ExperimentConfig, out_dir=None, with_encoder_only: bool = True) -> dict[str, Any]:
    """Full pipeline on the synthetic corpus plus the encoder-only comparison on dev."""
    cfg.validate()
    t0 = time.time()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    ser, ser_info = train_ser_model(cfg, data)
    clf, res = train_ssr_model(cfg, data, log_path=out / "train_full.jsonl" if out else None)
    preds = predict_corpus(data.test, cfg.window, clf, ser)
    test_window = evaluate_predictions(preds, data.test, cfg.window, "window")
    test_dialogue = evaluate_predictions(preds, data.test, cfg.window, "dialogue")
    test_gold = gold_symptom_report(clf, data.test, cfg.window)
    results: dict[str, Any] = {
        "config_digest": cfg.digest(),
        **ser_info,
        "full_dev_f1": res.best_dev_f1,
        "full_best_epoch": res.best_epoch,
        "test_window": test_window.to_json(),
        "test_dialogue": test_dialogue.to_json(),
        "test_gold_symptoms": test_gold.to_json(),
        "test_gold_report": test_gold,
        "ssr_digest": state_digest(clf.model),
        "ser_digest": state_digest(ser.tagger),
        "prediction_digest": hashlib.sha256(
            json.dumps([p.to_json() for p in preds], sort_keys=True).encode()).hexdigest(),
    }
    if with_encoder_only:
        enc_settings = dataclasses.replace(cfg.ssr, matcher_mode="encoder_only")
        enc_clf, enc_res = train_ssr_model(cfg, data, enc_settings,
                                           log_path=out / "train_encoder_only.jsonl" if out else None)
        results["encoder_only_dev_f1"] = enc_res.best_dev_f1
        results["encoder_only_digest"] = state_digest(enc_clf.model)
    results["seconds"] = time.time() - t0
    if out:
        clf.save(out / "ssr")
        ser.save(out / "ser")
        (out / "predictions.jsonl").write_text("".join(json.dumps(p.to_json()) + "\n" for p in preds))
        (out / "results.json").write_text(json.dumps({k: v for k, v in results.items() if k != "test_gold_report"},
                                                     indent=2))
    return results


ABLATIONS = {
    "full": {},
    "encoder_only": {"matcher_mode": "encoder_only"},
    "hard_prompt": {"prompt_mode": "hard"},
    "no_knowledge": {"use_knowledge": False},
}


def run_ablations(cfg: ExperimentConfig, variants: Sequence[str] = tuple(ABLATIONS), out_dir=None,
                  data: ExperimentData | None = None) -> dict[str, dict]:
    """Train each variant with gold symptoms (SSR only); report dev and test window-level scores."""
    cfg.validate()
    unknown = set(variants) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation variant(s) {sorted(unknown)}; choose from {list(ABLATIONS)}")
    data = data or prepare_data(cfg)
    table = {}
    for name in variants:
        settings = dataclasses.replace(cfg.ssr, **ABLATIONS[name])
        log = Path(out_dir) / f"train_{name}.jsonl" if out_dir else None
        clf, res = train_ssr_model(cfg, data, settings, log_path=log)
        test = gold_symptom_report(clf, data.test, cfg.window)
        table[name] = {"dev_f1": res.best_dev_f1, "best_epoch": res.best_epoch, "test_f1": test.f1,
                       "test_per_status_f1": test.per_status_f1}
        logger.info("ablation %s: %s", name, table[name])
    return table


def run_cross_symptom(cfg: ExperimentConfig, random_report: MetricsReport | None = None) -> dict[str, Any]:
    """Per-status F1 with gold symptoms: random split versus a split whose test symptoms are unseen.

    ``random_report`` is the gold-symptom test report of a model already trained on the random
    split with the same config (as produced by :func:`run_synthetic_experiment`); it is computed
    here when omitted.
    """
    cfg.validate()
    rand = random_report
    if rand is None:
        random_data = prepare_data(cfg)
        random_clf, _ = train_ssr_model(cfg, random_data)
        rand = gold_symptom_report(random_clf, random_data.test, cfg.window)
    cs_split = SplitSpec(SplitMode.BY_SYMPTOM, cfg.split.ratios, cfg.split.seed)
    cs_data = prepare_data(cfg, cs_split)
    cs_clf, cs_res = train_ssr_model(cfg, cs_data)
    cs = gold_symptom_report(cs_clf, cs_data.test, cfg.window)
    train_syms = {m.canonical for d in cs_data.train for m in d.annotations}
    test_syms = {m.canonical for d in cs_data.test for m in d.annotations}
    drop = {st.value: rand.per_status_f1[st.value] - cs.per_status_f1[st.value] for st in STATUSES}
    return {
        "random": rand.to_json(),
        "by_symptom": cs.to_json(),
        "by_symptom_dev_f1": cs_res.best_dev_f1,
        "per_status_drop": drop,
        "unseen_test_symptoms": sorted(test_syms - train_syms),
        "overlap": sorted(test_syms & train_syms),
        "cs_digest": state_digest(cs_clf.model),
    }
