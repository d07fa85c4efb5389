"""End-to-end prediction: SER spans -> canonical symptoms -> status per (window, symptom)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .corpus import STATUSES, Dialogue, DialogueWindow, Status, slide_windows
from .encoder import EncoderConfig, Vocab, tokenize_with_offsets
from .metrics import MetricsReport, dialogue_level_aggregate, micro_prf
from .ser import SERTagger, StandardizerModel, extract_spans, standardize, viterbi_decode
from .training import StatusClassifier


@dataclass
class DetectedMention:
    utt: int
    start: int
    end: int
    surface: str
    canonical: str


class SERPipeline:
    def __init__(self, tagger: SERTagger, vocab: Vocab, standardizer: StandardizerModel, max_len: int):
        self.tagger = tagger
        self.vocab = vocab
        self.standardizer = standardizer
        self.max_len = max_len

    @torch.no_grad()
    def detect(self, text: str, utt: int = 0) -> list[DetectedMention]:
        offs = tokenize_with_offsets(text)[: self.max_len]
        if not offs:
            return []
        self.tagger.eval()
        ids = torch.tensor([self.vocab.encode([t for t, _, _ in offs])])
        em = self.tagger.emissions(ids, torch.ones_like(ids, dtype=torch.bool))[0]
        path, _ = viterbi_decode(em, self.tagger.crf)
        return [DetectedMention(utt, s.start, s.end, s.surface, standardize(s.surface, self.standardizer))
                for s in extract_spans(path, text, offs)]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.tagger.state_dict(), d / "ser.pt")
        self.vocab.save(d / "vocab.txt")
        self.standardizer.save(d / "standardizer.npz")
        (d / "config.json").write_text(json.dumps({"encoder": asdict(self.tagger.encoder.cfg),
                                                   "max_len": self.max_len}, indent=2))

    @classmethod
    def load(cls, directory) -> "SERPipeline":
        d = Path(directory)
        conf = json.loads((d / "config.json").read_text())
        vocab = Vocab.load(d / "vocab.txt")
        tagger = SERTagger(len(vocab), EncoderConfig(**conf["encoder"]), conf["max_len"])
        tagger.load_state_dict(torch.load(d / "ser.pt", weights_only=True))
        return cls(tagger, vocab, StandardizerModel.load(d / "standardizer.npz"), conf["max_len"])


@dataclass
class WindowPrediction:
    window_id: str
    dialogue_id: str
    pairs: frozenset
    provenance: dict = field(default_factory=dict)
    probabilities: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"window": self.window_id, "dialogue": self.dialogue_id,
                "pairs": sorted([s, st.value] for s, st in self.pairs),
                "provenance": self.provenance,
                "probabilities": {k: [round(x, 6) for x in v] for k, v in self.probabilities.items()}}


def predict_corpus(dialogues: Sequence[Dialogue], n: int, ssr: StatusClassifier, ser: SERPipeline | None = None,
                   gold_symptoms: bool = False, batch_size: int = 256) -> list[WindowPrediction]:
    """Predict (symptom, status) pairs for every window of every dialogue.

    With ``gold_symptoms=True`` the SER stage is bypassed and each window is queried with exactly
    its gold symptom keys.
    """
    if ser is None and not gold_symptoms:
        raise ValueError("an SER pipeline is required unless gold_symptoms=True")
    items: list[tuple[DialogueWindow, str]] = []
    plans = []
    for d in dialogues:
        detected: dict[int, list[DetectedMention]] = {}
        if not gold_symptoms:
            detected = {u.index: ser.detect(u.text, u.index) for u in d.utterances}
        for w in slide_windows(d, n):
            prov: dict[str, list] = {}
            if gold_symptoms:
                symptoms = sorted({s for s, _ in w.gold})
            else:
                for u in w.utterances:
                    for m in detected[u.index]:
                        prov.setdefault(m.canonical, []).append([m.utt, m.start, m.end, m.surface])
                symptoms = sorted(prov)
            plans.append((w, symptoms, prov))
            items += [(w, s) for s in symptoms]
    probs = ssr.predict_pairs(items, batch_size)
    out, k = [], 0
    for w, symptoms, prov in plans:
        pairs, pmap = set(), {}
        for s in symptoms:
            row = probs[k]
            k += 1
            pairs.add((s, STATUSES[int(row.argmax())]))
            pmap[s] = row.tolist()
        out.append(WindowPrediction(w.id, w.dialogue_id, frozenset(pairs), prov, pmap))
    return out


def predict_dialogue(dialogue: Dialogue, n: int, ssr: StatusClassifier, ser: SERPipeline | None = None,
                     gold_symptoms: bool = False) -> list[WindowPrediction]:
    return predict_corpus([dialogue], n, ssr, ser, gold_symptoms)


def evaluate_predictions(predictions: Sequence[WindowPrediction], dialogues: Sequence[Dialogue], n: int,
                         level: str = "window") -> MetricsReport:
    windows = [w for d in dialogues for w in slide_windows(d, n)]
    gold = {w.id: w.gold for w in windows}
    pred = {p.window_id: p.pairs for p in predictions}
    if level == "window":
        return micro_prf(pred, gold)
    if level == "dialogue":
        return dialogue_level_aggregate(pred, gold, {w.id: w.dialogue_id for w in windows})
    raise ValueError(f"unknown evaluation level {level!r}")
