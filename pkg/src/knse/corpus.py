"""Dialogue data model, JSONL / CMDD-style readers, sliding windows and splits."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Raised when a corpus record violates the dialogue schema."""


class SplitError(ValueError):
    """Raised when a requested split cannot satisfy its disjointness constraint."""


class Speaker(str, Enum):
    DOCTOR = "Doctor"
    PATIENT = "Patient"


class Status(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    UNKNOWN = "Unknown"

    @property
    def index(self) -> int:
        return STATUSES.index(self)


STATUSES: tuple[Status, ...] = (Status.POSITIVE, Status.NEGATIVE, Status.UNKNOWN)


@dataclass(frozen=True)
class Utterance:
    speaker: Speaker
    text: str
    index: int


@dataclass(frozen=True)
class SymptomMention:
    utt: int
    start: int
    end: int
    surface: str
    canonical: str
    status: Status | None = None


@dataclass(frozen=True)
class Dialogue:
    id: str
    disease: str
    utterances: tuple[Utterance, ...]
    annotations: tuple[SymptomMention, ...] = ()

    def symptoms(self) -> set[str]:
        return {m.canonical for m in self.annotations}

    def mentions_in(self, utt: int) -> list[SymptomMention]:
        return [m for m in self.annotations if m.utt == utt]


@dataclass(frozen=True)
class DialogueWindow:
    dialogue_id: str
    end: int
    utterances: tuple[Utterance, ...]
    n: int
    gold: frozenset[tuple[str, Status]]
    mentions: tuple[SymptomMention, ...] = ()

    @property
    def id(self) -> str:
        return f"{self.dialogue_id}#{self.end}"

    @property
    def start(self) -> int:
        return self.utterances[0].index


@dataclass
class SymptomCatalog:
    """Canonical symptom names (ordered) plus a surface-form -> canonical alias map."""

    entries: list[str]
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise CorpusError("catalog: duplicate canonical names")
        known = set(self.entries)
        for alias, canon in self.aliases.items():
            if canon not in known:
                raise CorpusError(f"catalog: alias {alias!r} maps to unknown symptom {canon!r}")

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def _index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.entries)}

    def index(self, name: str) -> int:
        return self.entries.index(name)

    def aliases_of(self, canonical: str) -> list[str]:
        return [a for a, c in self.aliases.items() if c == canonical]

    def to_json(self) -> dict[str, list[str]]:
        return {name: self.aliases_of(name) for name in self.entries}

    @classmethod
    def from_json(cls, data: dict[str, list[str]]) -> "SymptomCatalog":
        aliases = {}
        for canon, forms in data.items():
            for form in forms:
                aliases[form] = canon
        return cls(entries=list(data), aliases=aliases)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SymptomCatalog":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class SplitMode(str, Enum):
    RANDOM = "Random"
    BY_DISEASE = "ByDisease"
    BY_SYMPTOM = "BySymptom"


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode = SplitMode.RANDOM
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SplitMode(self.mode))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 3 or any(not 0.0 < r < 1.0 for r in self.ratios):
            raise ValueError(f"split ratios must be three fractions in (0, 1), got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(self.ratios)}")


# ---------------------------------------------------------------------------
# Serialization

def dialogue_to_record(d: Dialogue) -> dict:
    return {
        "id": d.id,
        "disease": d.disease,
        "utterances": [{"speaker": u.speaker.value, "text": u.text} for u in d.utterances],
        "annotations": [
            {
                "utt": m.utt,
                "start": m.start,
                "end": m.end,
                "surface": m.surface,
                "canonical": m.canonical,
                "status": m.status.value if m.status is not None else None,
            }
            for m in d.annotations
        ],
    }


def _require(rec: dict, key: str, rid):
    if key not in rec:
        raise CorpusError(f"record {rid}: missing field {key!r}")
    return rec[key]


def dialogue_from_record(rec: dict, catalog: SymptomCatalog | None = None) -> Dialogue:
    """Validate one JSONL record and build a :class:`Dialogue`."""
    rid = rec.get("id", "<no id>")
    did = str(_require(rec, "id", rid))
    disease = str(rec.get("disease", ""))
    raw_utts = _require(rec, "utterances", rid)
    if not isinstance(raw_utts, list) or not raw_utts:
        raise CorpusError(f"record {rid}: field 'utterances' must be a non-empty list")
    utts = []
    for i, u in enumerate(raw_utts):
        try:
            speaker = Speaker(_require(u, "speaker", rid))
        except ValueError:
            raise CorpusError(f"record {rid}: field 'utterances[{i}].speaker' has invalid value {u.get('speaker')!r}")
        text = _require(u, "text", rid)
        if not isinstance(text, str) or not " ".join(text.split()):
            raise CorpusError(f"record {rid}: field 'utterances[{i}].text' is empty")
        utts.append(Utterance(speaker, text, i))
    mentions = []
    for k, a in enumerate(rec.get("annotations", [])):
        where = f"annotations[{k}]"
        for key in ("utt", "start", "end", "canonical"):
            if key not in a:
                raise CorpusError(f"record {rid}: missing field '{where}.{key}'")
        ui, start, end = a["utt"], a["start"], a["end"]
        if not isinstance(ui, int) or not 0 <= ui < len(utts):
            raise CorpusError(f"record {rid}: field '{where}.utt' out of range ({ui})")
        text = utts[ui].text
        if not (isinstance(start, int) and isinstance(end, int) and 0 <= start < end <= len(text)):
            raise CorpusError(
                f"record {rid}: field '{where}.end' span ({start}, {end}) outside utterance of length {len(text)}"
            )
        surface = a.get("surface", text[start:end])
        if surface != text[start:end]:
            raise CorpusError(f"record {rid}: field '{where}.surface' does not match utterance text")
        canonical = a["canonical"]
        if catalog is not None and canonical not in catalog:
            raise CorpusError(f"record {rid}: unknown canonical symptom {canonical!r}")
        status = a.get("status")
        if status is not None:
            try:
                status = Status(status)
            except ValueError:
                raise CorpusError(f"record {rid}: field '{where}.status' has invalid value {status!r}")
        mentions.append(SymptomMention(ui, start, end, surface, canonical, status))
    return Dialogue(did, disease, tuple(utts), tuple(mentions))


def write_jsonl(dialogues: Iterable[Dialogue], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps(dialogue_to_record(d), ensure_ascii=False, sort_keys=True) + "\n")


# CMDD-style records: {id: {"disease"|"diagnosis": str, "dialogue": [turn, ...]}} where each turn
# carries a per-character "BIO_label" string and parallel "symptom_norm" / "symptom_type" lists.
CMDD_SPEAKERS = {"医生": Speaker.DOCTOR, "患者": Speaker.PATIENT, "Doctor": Speaker.DOCTOR, "Patient": Speaker.PATIENT}
CMDD_STATUS = {"0": Status.NEGATIVE, "1": Status.POSITIVE, "2": Status.UNKNOWN}


def _cmdd_spans(labels: list[str]) -> list[tuple[int, int]]:
    spans, start = [], None
    for i, tag in enumerate(labels + ["O"]):
        if tag.startswith("B") or tag == "O" or (tag.startswith("I") and start is None):
            if start is not None:
                spans.append((start, i))
                start = None
            if tag.startswith("B") or tag.startswith("I"):
                start = i
    return spans


def _read_cmdd(path, catalog: SymptomCatalog | None) -> list[Dialogue]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    items = data.items() if isinstance(data, dict) else ((r.get("id"), r) for r in data)
    out = []
    for rid, rec in items:
        turns = _require(rec, "dialogue", rid)
        utterances, annotations = [], []
        for i, turn in enumerate(turns):
            speaker = CMDD_SPEAKERS.get(turn.get("speaker"))
            if speaker is None:
                raise CorpusError(f"record {rid}: field 'dialogue[{i}].speaker' has invalid value {turn.get('speaker')!r}")
            text = _require(turn, "sentence", rid)
            utterances.append({"speaker": speaker.value, "text": text})
            labels = turn.get("BIO_label", "").split()
            if labels and len(labels) != len(text):
                raise CorpusError(f"record {rid}: field 'dialogue[{i}].BIO_label' length {len(labels)} != sentence length {len(text)}")
            spans = _cmdd_spans(labels)
            norms = turn.get("symptom_norm", [])
            types = turn.get("symptom_type", [])
            if len(norms) != len(spans) or len(types) != len(spans):
                raise CorpusError(f"record {rid}: field 'dialogue[{i}].symptom_norm' does not align with BIO spans")
            for (s, e), canon, typ in zip(spans, norms, types):
                if str(typ) not in CMDD_STATUS:
                    raise CorpusError(f"record {rid}: field 'dialogue[{i}].symptom_type' has invalid value {typ!r}")
                annotations.append({"utt": i, "start": s, "end": e, "surface": text[s:e],
                                    "canonical": canon, "status": CMDD_STATUS[str(typ)].value})
        disease = rec.get("disease", rec.get("diagnosis", ""))
        out.append(dialogue_from_record(
            {"id": str(rid), "disease": disease, "utterances": utterances, "annotations": annotations}, catalog))
    return out


def load_corpus(path, format: str = "jsonl", catalog: SymptomCatalog | None = None) -> list[Dialogue]:
    """Read dialogues from ``path``; every record is validated and the first bad one raises."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "cmdd_json":
        return _read_cmdd(path, catalog)
    if format != "jsonl":
        raise ValueError(f"unknown corpus format {format!r}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {lineno}: invalid JSON ({e})") from None
            out.append(dialogue_from_record(rec, catalog))
    return out


# ---------------------------------------------------------------------------
# Windows

def window_gold(mentions: Sequence[SymptomMention]) -> frozenset[tuple[str, Status]]:
    """Collapse mentions to (canonical, status) pairs; a later mention overrides an earlier status."""
    latest: dict[str, Status] = {}
    for m in sorted(mentions, key=lambda m: (m.utt, m.start)):
        if m.status is None:
            continue
        prev = latest.get(m.canonical)
        if prev is not None and prev != m.status:
            logger.warning("conflicting statuses for %r in one window (%s -> %s); keeping latest",
                           m.canonical, prev.value, m.status.value)
        latest[m.canonical] = m.status
    return frozenset(latest.items())


def slide_windows(d: Dialogue, n: int = 5) -> list[DialogueWindow]:
    """One window per ending utterance, holding at most ``n`` utterances (left-truncated)."""
    if n < 1:
        raise ValueError(f"window size must be >= 1, got {n}")
    if not d.utterances:
        raise ValueError(f"dialogue {d.id} has no utterances")
    out = []
    for i in range(len(d.utterances)):
        lo = max(0, i - n + 1)
        mentions = tuple(m for m in d.annotations if lo <= m.utt <= i)
        out.append(DialogueWindow(d.id, i, d.utterances[lo:i + 1], n, window_gold(mentions), mentions))
    return out


def corpus_windows(dialogues: Iterable[Dialogue], n: int = 5) -> list[DialogueWindow]:
    return [w for d in dialogues for w in slide_windows(d, n)]


def rename_symptoms(window: DialogueWindow, mapping: dict[str, str], surface) -> DialogueWindow:
    """Rewrite a window so every mention of ``c`` becomes a mention of ``mapping[c]``.

    ``surface(new_canonical)`` picks the text written into the utterance. Offsets, gold pairs and
    statuses are carried over; the mapping must be injective on the window's symptoms.
    """
    targets = [mapping.get(m.canonical, m.canonical) for m in window.mentions]
    if len(set(targets)) != len({m.canonical for m in window.mentions}):
        raise ValueError("symptom mapping merges distinct symptoms")
    utts, mentions = [], []
    for u in window.utterances:
        text, pieces, cursor = u.text, [], 0
        length = 0
        for m in sorted((m for m in window.mentions if m.utt == u.index), key=lambda m: m.start):
            new = mapping.get(m.canonical, m.canonical)
            form = surface(new)
            pieces.append(text[cursor:m.start])
            length += m.start - cursor
            mentions.append(SymptomMention(m.utt, length, length + len(form), form, new, m.status))
            pieces.append(form)
            length += len(form)
            cursor = m.end
        pieces.append(text[cursor:])
        utts.append(Utterance(u.speaker, "".join(pieces), u.index))
    gold = frozenset((mapping.get(c, c), st) for c, st in window.gold)
    return DialogueWindow(window.dialogue_id, window.end, tuple(utts), window.n, gold, tuple(mentions))


# ---------------------------------------------------------------------------
# Splits

def _split_counts(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``total`` items; each part gets at least one if possible."""
    raw = [r * total for r in ratios]
    counts = [int(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] == 0 and total >= len(counts):
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def _partition(items: list, counts: list[int]) -> list[list]:
    out, pos = [], 0
    for c in counts:
        out.append(items[pos:pos + c])
        pos += c
    return out


def _symptom_components(corpus: Sequence[Dialogue]) -> list[list[str]]:
    """Connected components of the symptom co-occurrence graph (sorted for determinism)."""
    parent: dict[str, str] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for d in corpus:
        syms = sorted(d.symptoms())
        for s in syms:
            parent.setdefault(s, s)
        for s in syms[1:]:
            ra, rb = find(syms[0]), find(s)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = {}
    for s in sorted(parent):
        groups.setdefault(find(s), []).append(s)
    return sorted(groups.values())


def _assign_symptoms(corpus, ratios, rng) -> list[set[str]]:
    comps = _symptom_components(corpus)
    total = sum(len(c) for c in comps)
    targets = [r * total for r in ratios]
    if len(comps) >= 3:
        rng.shuffle(comps)
        sets: list[set[str]] = [set(), set(), set()]
        # fill test, then dev, train takes the rest
        for comp in comps:
            for k in (2, 1):
                if len(sets[k]) < targets[k] - 1e-9 and len(sets[k]) + len(comp) <= max(targets[k] * 1.5, 1):
                    sets[k].update(comp)
                    break
            else:
                sets[0].update(comp)
        if all(sets):
            return sets
    # co-occurrence graph too connected: partition symptoms directly, mixed dialogues get dropped
    symptoms = sorted({s for d in corpus for s in d.symptoms()})
    rng.shuffle(symptoms)
    return [set(p) for p in _partition(symptoms, _split_counts(len(symptoms), ratios))]


def make_cross_domain_split(corpus: Sequence[Dialogue], spec: SplitSpec):
    """Partition dialogues into (train, dev, test) per ``spec.mode``."""
    rng = random.Random(spec.seed)
    corpus = list(corpus)
    if spec.mode == SplitMode.RANDOM:
        if len(corpus) < 3:
            raise SplitError(f"random split needs >= 3 dialogues, got {len(corpus)}")
        order = list(range(len(corpus)))
        rng.shuffle(order)
        parts = _partition(order, _split_counts(len(order), spec.ratios))
        return tuple([corpus[i] for i in sorted(p)] for p in parts)
    if spec.mode == SplitMode.BY_DISEASE:
        diseases = sorted({d.disease for d in corpus})
        if len(diseases) < 3:
            raise SplitError(f"ByDisease split needs >= 3 distinct diseases, found {len(diseases)}: {diseases}")
        rng.shuffle(diseases)
        parts = [set(p) for p in _partition(diseases, _split_counts(len(diseases), spec.ratios))]
        return tuple([d for d in corpus if d.disease in p] for p in parts)
    symptoms = {s for d in corpus for s in d.symptoms()}
    if len(symptoms) < 3:
        raise SplitError(f"BySymptom split needs >= 3 distinct symptoms, found {len(symptoms)}")
    sets = _assign_symptoms(corpus, spec.ratios, rng)
    parts: tuple[list[Dialogue], ...] = ([], [], [])
    dropped = 0
    for d in corpus:
        syms = d.symptoms()
        home = [k for k in range(3) if syms <= sets[k]]
        if home:
            parts[home[0]].append(d)
        else:
            dropped += 1
    if dropped:
        logger.info("BySymptom split dropped %d dialogues that mix symptom sets", dropped)
    if not all(parts):
        sizes = [len(p) for p in parts]
        raise SplitError(f"BySymptom split left an empty partition (sizes {sizes}, dropped {dropped})")
    return parts


def split_symptoms(parts) -> list[set[str]]:
    return [set().union(*(d.symptoms() for d in p)) if p else set() for p in parts]
