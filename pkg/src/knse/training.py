"""SSR/SER training loops and the status-classifier wrapper used at inference time."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import STATUSES, Dialogue, DialogueWindow, Status, SymptomCatalog, rename_symptoms
from .encoder import SEP, EncoderConfig, TokenSeq, Vocab, build_triplet, collate, tokenize
from .matcher import KNSEModel
from .metrics import micro_prf
from .prompts import FALLBACK_TEMPLATE, KnowledgeStore, lookup_knowledge, make_hypothesis
from .ser import SERExample, SERTagger, crf_nll, extract_spans, viterbi_decode

logger = logging.getLogger(__name__)

# fine-tuning rate for a pretrained encoder; far too small for the from-scratch defaults
PRETRAINED_LEARNING_RATE = 1e-5
NONCE_PREFIX = "nonce"


def nonce_symptoms(count: int) -> list[str]:
    """Placeholder symptom names for augmentation; each is a single token absent from real text."""
    return [f"{NONCE_PREFIX}{i}" for i in range(count)]


def is_nonce(symptom: str) -> bool:
    return symptom.startswith(NONCE_PREFIX) and symptom[len(NONCE_PREFIX):].isdigit()


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 3e-4
    epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.01
    adam_eps: float = 1e-6
    seed: int = 0
    # stop as soon as train accuracy reaches this value (capacity checks)
    target_train_accuracy: float | None = None
    eval_batch_size: int = 256

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1 or self.eval_batch_size < 1:
            raise ValueError("batch_size, epochs and eval_batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")


@dataclass
class SSRSettings:
    prompt_mode: str = "soft"
    use_knowledge: bool = True
    matcher_mode: str = "full"
    prompt_prefix: int = 10
    prompt_suffix: int = 5
    tie_branches: bool = False

    def validate(self) -> None:
        if self.prompt_mode not in ("hard", "soft"):
            raise ValueError(f"prompt_mode must be 'hard' or 'soft', got {self.prompt_mode!r}")
        if self.matcher_mode not in ("full", "encoder_only"):
            raise ValueError(f"matcher_mode must be 'full' or 'encoder_only', got {self.matcher_mode!r}")
        if self.prompt_prefix < 0 or self.prompt_suffix < 0:
            raise ValueError("prompt lengths must be >= 0")


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


def _param_norm(model) -> float:
    return float(math.sqrt(sum(float(p.detach().pow(2).sum()) for p in model.parameters())))


class StatusClassifier:
    """A :class:`KNSEModel` together with the vocabulary, knowledge store and triplet settings."""

    def __init__(self, model: KNSEModel, vocab: Vocab, store: KnowledgeStore, enc_cfg: EncoderConfig,
                 settings: SSRSettings):
        self.model = model
        self.vocab = vocab
        self.store = store
        self.enc_cfg = enc_cfg
        self.settings = settings
        self._knowledge: dict[str, list[int]] = {}

    @classmethod
    def create(cls, vocab: Vocab, store: KnowledgeStore, enc_cfg: EncoderConfig, settings: SSRSettings,
               seed: int = 0) -> "StatusClassifier":
        settings.validate()
        if settings.prompt_mode == "soft" and (vocab.prompt_prefix, vocab.prompt_suffix) != (
                settings.prompt_prefix, settings.prompt_suffix):
            raise ValueError("vocab prompt slots do not match the soft prompt configuration")
        torch.manual_seed(seed)
        num_prompts = vocab.num_prompts if settings.prompt_mode == "soft" else 0
        model = KNSEModel(len(vocab), enc_cfg, num_prompts, vocab.prompt_offset, settings.tie_branches)
        return cls(model, vocab, store, enc_cfg, settings)

    def knowledge_ids(self, symptom: str) -> list[int]:
        if symptom not in self._knowledge:
            if is_nonce(symptom):
                # placeholders never reach the provider
                toks = tokenize(FALLBACK_TEMPLATE.format(symptom))
            else:
                toks = lookup_knowledge(symptom, self.store)
            self._knowledge[symptom] = self.vocab.encode(toks)
        return self._knowledge[symptom]

    def triplet(self, window: DialogueWindow, symptom: str) -> TokenSeq:
        hyp = make_hypothesis(symptom, self.settings.prompt_mode, self.vocab)
        knw = self.knowledge_ids(symptom) if self.settings.use_knowledge else None
        seq = build_triplet(window, hyp, knw, self.vocab, self.enc_cfg)
        seq.meta["symptom"] = symptom
        return seq

    def logits(self, seqs: Sequence[TokenSeq]) -> torch.Tensor:
        batch = collate(seqs, self.vocab[SEP])
        return self.model(batch, self.settings.matcher_mode, self.settings.use_knowledge)

    @torch.no_grad()
    def probabilities(self, seqs: Sequence[TokenSeq], batch_size: int = 256) -> torch.Tensor:
        self.model.eval()
        out = [torch.softmax(self.logits(seqs[i:i + batch_size]), -1) for i in range(0, len(seqs), batch_size)]
        return torch.cat(out) if out else torch.zeros(0, len(STATUSES))

    def predict_pairs(self, items: Sequence[tuple[DialogueWindow, str]], batch_size: int = 256):
        """Status distribution for every (window, symptom) item."""
        seqs = [self.triplet(w, s) for w, s in items]
        return self.probabilities(seqs, batch_size)

    # checkpoint container: model.pt (named tensors), config.json, vocab.txt, knowledge.json
    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), d / "model.pt")
        self.vocab.save(d / "vocab.txt")
        self.store.save(d / "knowledge.json")
        shapes = {k: list(v.shape) for k, v in self.model.state_dict().items()}
        (d / "config.json").write_text(json.dumps(
            {"encoder": asdict(self.enc_cfg), "ssr": asdict(self.settings), "tensors": shapes}, indent=2))

    @classmethod
    def load(cls, directory) -> "StatusClassifier":
        d = Path(directory)
        conf = json.loads((d / "config.json").read_text())
        enc_cfg = EncoderConfig(**conf["encoder"])
        settings = SSRSettings(**conf["ssr"])
        vocab = Vocab.load(d / "vocab.txt")
        store = KnowledgeStore.load(d / "knowledge.json")
        clf = cls.create(vocab, store, enc_cfg, settings)
        clf.model.load_state_dict(torch.load(d / "model.pt", weights_only=True))
        return clf


@dataclass
class SSRExample:
    seq: TokenSeq
    label: int
    window_id: str
    symptom: str
    window: DialogueWindow | None = None


def ssr_examples(windows: Sequence[DialogueWindow], clf: StatusClassifier) -> list[SSRExample]:
    """One example per gold-mentioned symptom in each window (symptoms in sorted order)."""
    out = []
    for w in windows:
        for sym, st in sorted(w.gold):
            out.append(SSRExample(clf.triplet(w, sym), st.index, w.id, sym, w))
    return out


@dataclass
class SymptomSwap:
    """Training-time augmentation that renames the symptoms of a window.

    Each epoch, a window is rewritten with probability ``rate``: its symptoms map injectively onto
    random symptoms from ``forms`` and every mention is re-rendered as one of the new symptom's
    surface forms. Statuses and dialogue structure stay untouched, so the model cannot tie a status
    to a particular symptom word.

    ``forms`` holds the training symptoms and, optionally, nonce placeholders. A placeholder is
    drawn rarely enough that its embedding stays close to initialization, which is exactly what a
    symptom never seen in training looks like. Training on them teaches the matcher to find the
    queried symptom by identity with the premise tokens rather than by recognizing familiar words.
    """

    forms: dict[str, list[str]]
    rate: float = 0.5

    @classmethod
    def from_dialogues(cls, dialogues: Sequence[Dialogue], catalog: SymptomCatalog | None = None,
                       rate: float = 0.5, nonce: int = 0) -> "SymptomSwap":
        pool = sorted({m.canonical for d in dialogues for m in d.annotations})
        forms = {c: [c] + (catalog.aliases_of(c) if catalog else []) for c in pool}
        forms.update({n: [n] for n in nonce_symptoms(nonce)})
        return cls(forms, rate)

    def window(self, w: DialogueWindow, rng: random.Random) -> DialogueWindow:
        syms = sorted({m.canonical for m in w.mentions})
        pool = sorted(self.forms)
        if not syms or len(pool) < len(syms):
            return w
        mapping = dict(zip(syms, rng.sample(pool, len(syms))))
        return rename_symptoms(w, mapping, lambda c: rng.choice(self.forms[c]))

    def apply(self, examples: Sequence[SSRExample], clf: StatusClassifier, rng: random.Random) -> list[SSRExample]:
        out: list[SSRExample] = []
        groups: dict[str, list[SSRExample]] = {}
        for e in examples:
            groups.setdefault(e.window_id, []).append(e)
        for group in groups.values():
            w = group[0].window
            if w is not None and w.mentions and rng.random() < self.rate:
                out.extend(ssr_examples([self.window(w, rng)], clf))
            else:
                out.extend(group)
        return out


def evaluate_known_symptoms(clf: StatusClassifier, examples: Sequence[SSRExample], batch_size: int = 256):
    """Window-level report when the gold symptoms are supplied; also returns accuracy."""
    probs = clf.probabilities([e.seq for e in examples], batch_size)
    pred = probs.argmax(-1).tolist()
    gold_pairs: dict[str, set] = {}
    pred_pairs: dict[str, set] = {}
    for e, p in zip(examples, pred):
        gold_pairs.setdefault(e.window_id, set()).add((e.symptom, STATUSES[e.label]))
        pred_pairs.setdefault(e.window_id, set()).add((e.symptom, STATUSES[p]))
    report = micro_prf(pred_pairs, gold_pairs)
    acc = float(np.mean([p == e.label for e, p in zip(examples, pred)])) if examples else 0.0
    return report, acc


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dev_f1: float = -1.0
    best_state: dict | None = None


def train_ssr(clf: StatusClassifier, train: Sequence[SSRExample], dev: Sequence[SSRExample] | None,
              cfg: TrainConfig, log_path=None, augment: SymptomSwap | None = None) -> TrainResult:
    """Cross-entropy training with per-epoch dev selection; the best weights are loaded back into ``clf``."""
    cfg.validate()
    model = clf.model
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = random.Random(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg)
    sep = clf.vocab[SEP]
    original = train
    result = TrainResult()
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            train = augment.apply(original, clf, aug_rng) if augment else original
            labels = torch.tensor([e.label for e in train])
            order = rng.permutation(len(train))
            total, correct = 0.0, 0
            for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                logits = model(collate([train[i].seq for i in idx], sep), clf.settings.matcher_mode,
                               clf.settings.use_knowledge)
                y = labels[idx]
                loss = torch.nn.functional.cross_entropy(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}; "
                                        f"parameter norm {_param_norm(model):.4g}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                correct += int((logits.argmax(-1) == y).sum())
            entry = {"epoch": epoch, "train_loss": total / max(len(train), 1),
                     "train_acc": correct / max(len(train), 1)}
            if dev:
                report, _ = evaluate_known_symptoms(clf, dev, cfg.eval_batch_size)
                entry.update(dev_p=report.precision, dev_r=report.recall, dev_f1=report.f1)
                score = report.f1
            else:
                score = entry["train_acc"]
            result.log.append(entry)
            logger.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in entry.items() if k != "epoch"})
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if score > result.best_dev_f1:
                result.best_dev_f1, result.best_epoch = score, epoch
                result.best_state = copy.deepcopy(model.state_dict())
            if cfg.target_train_accuracy is not None:
                _, acc = evaluate_known_symptoms(clf, original, cfg.eval_batch_size)
                entry["train_eval_acc"] = acc
                if acc >= cfg.target_train_accuracy:
                    break
    finally:
        if log_fh:
            log_fh.close()
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result


# ---------------------------------------------------------------------------
# SER

def _ser_batch(examples: Sequence[SERExample]):
    L = max(len(e.ids) for e in examples)
    ids = torch.zeros(len(examples), L, dtype=torch.long)
    tags = torch.full((len(examples), L), 2, dtype=torch.long)
    mask = torch.zeros(len(examples), L, dtype=torch.bool)
    for i, e in enumerate(examples):
        ids[i, :len(e.ids)] = torch.tensor(e.ids)
        tags[i, :len(e.tags)] = torch.tensor(e.tags)
        mask[i, :len(e.ids)] = True
    return ids, tags, mask


def span_f1(tagger: SERTagger, examples: Sequence[SERExample]) -> float:
    """Exact-match span F1 of Viterbi decodes (token spans)."""
    tagger.eval()
    tp = fp = fn = 0
    with torch.no_grad():
        for start in range(0, len(examples), 256):
            chunk = examples[start:start + 256]
            ids, _, mask = _ser_batch(chunk)
            em = tagger.emissions(ids, mask)
            for i, e in enumerate(chunk):
                path, _ = viterbi_decode(em[i, :len(e.ids)], tagger.crf)
                offs = [("", j, j + 1) for j in range(len(e.ids))]
                pred = {s.tokens for s in extract_spans(path, " " * len(e.ids), offs)}
                gold = {s.tokens for s in extract_spans(e.tags, " " * len(e.ids), offs)}
                tp += len(pred & gold)
                fp += len(pred - gold)
                fn += len(gold - pred)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def train_ser(tagger: SERTagger, train: Sequence[SERExample], dev: Sequence[SERExample] | None,
              cfg: TrainConfig) -> TrainResult:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(tagger.parameters(), cfg)
    result = TrainResult()
    for epoch in range(1, cfg.epochs + 1):
        tagger.train()
        order = rng.permutation(len(train))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [train[i] for i in order[start:start + cfg.batch_size]]
            ids, tags, mask = _ser_batch(chunk)
            loss = crf_nll(tagger.emissions(ids, mask), tags, tagger.crf, mask).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite SER loss at epoch {epoch}, batch {bi}; "
                                    f"parameter norm {_param_norm(tagger):.4g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
        entry = {"epoch": epoch, "train_loss": total / max(len(train), 1)}
        score = span_f1(tagger, dev) if dev else -entry["train_loss"]
        if dev:
            entry["dev_span_f1"] = score
        result.log.append(entry)
        logger.info("ser epoch %d %s", epoch, entry)
        if score > result.best_dev_f1:
            result.best_dev_f1, result.best_epoch = score, epoch
            result.best_state = copy.deepcopy(tagger.state_dict())
    if result.best_state is not None:
        tagger.load_state_dict(result.best_state)
    return result
