"""Micro-averaged precision / recall / F1 over (symptom, status) pairs."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from .corpus import STATUSES, Status

Pair = tuple[str, Status]


@dataclass
class MetricsReport:
    level: str
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_status_f1: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _counts(predictions, gold, keep=lambda pair: True):
    tp = fp = fn = 0
    for key, g in gold.items():
        g = {x for x in g if keep(x)}
        p = {x for x in predictions.get(key, ()) if keep(x)}
        hit = len(p & g)
        tp += hit
        fp += len(p) - hit
        fn += len(g) - hit
    return tp, fp, fn


def micro_prf(predictions: Mapping[str, Iterable[Pair]], gold: Mapping[str, Iterable[Pair]],
              level: str = "window") -> MetricsReport:
    """A pair counts as a true positive only when both symptom and status match, per unit (window/dialogue)."""
    unknown = set(predictions) - set(gold)
    if unknown:
        raise KeyError(f"predictions for unknown ids: {sorted(unknown)[:5]}")
    predictions = {k: set(v) for k, v in predictions.items()}
    gold = {k: set(v) for k, v in gold.items()}
    tp, fp, fn = _counts(predictions, gold)
    p, r, f = _prf(tp, fp, fn)
    per_status = {}
    for st in STATUSES:
        per_status[st.value] = _prf(*_counts(predictions, gold, lambda x, st=st: x[1] == st))[2]
    return MetricsReport(level, p, r, f, tp, fp, fn, per_status)


def majority_status(votes: Iterable[Status]) -> Status:
    """Most frequent status; ties go Positive > Negative > Unknown."""
    counts = Counter(votes)
    return max(STATUSES, key=lambda s: (counts[s], -STATUSES.index(s)))


def dialogue_pairs(window_pairs: Mapping[str, Iterable[Pair]], dialogue_of: Mapping[str, str]) -> dict[str, set[Pair]]:
    votes: dict[str, dict[str, list[Status]]] = defaultdict(lambda: defaultdict(list))
    for wid, pairs in window_pairs.items():
        did = dialogue_of[wid]
        votes[did]
        for sym, st in pairs:
            votes[did][sym].append(st)
    return {did: {(sym, majority_status(v)) for sym, v in syms.items()} for did, syms in votes.items()}


def dialogue_level_aggregate(window_predictions: Mapping[str, Iterable[Pair]], window_gold: Mapping[str, Iterable[Pair]],
                             dialogue_of: Mapping[str, str]) -> MetricsReport:
    """Vote each symptom's status across a dialogue's windows (gold and predicted alike), then score per dialogue."""
    unknown = set(window_predictions) - set(window_gold)
    if unknown:
        raise KeyError(f"predictions for unknown window ids: {sorted(unknown)[:5]}")
    gold = dialogue_pairs(window_gold, dialogue_of)
    pred = dialogue_pairs({w: window_predictions.get(w, ()) for w in window_gold}, dialogue_of)
    return micro_prf(pred, gold, level="dialogue")
