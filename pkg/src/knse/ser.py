"""Symptom entity recognition: emission tagger + linear-chain CRF, span extraction, standardizer."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import Dialogue, SymptomCatalog
from .encoder import EncoderConfig, TransformerEncoder, Vocab, tokenize_with_offsets

TAGS = ("B-SYM", "I-SYM", "O")
B, I, O = 0, 1, 2
FORBIDDEN = -1e4


def bio_constraints() -> tuple[torch.Tensor, torch.Tensor]:
    """Masks of disallowed (prev -> next) transitions and disallowed start tags."""
    trans = torch.zeros(3, 3, dtype=torch.bool)
    trans[O, I] = True
    start = torch.zeros(3, dtype=torch.bool)
    start[I] = True
    return trans, start


class CRF(nn.Module):
    """Linear-chain CRF parameters; disallowed entries are pinned to ``FORBIDDEN``."""

    def __init__(self, num_tags: int = 3, constrained: bool = True):
        super().__init__()
        self.num_tags = num_tags
        self.transitions = nn.Parameter(torch.zeros(num_tags, num_tags))
        self.start = nn.Parameter(torch.zeros(num_tags))
        self.end = nn.Parameter(torch.zeros(num_tags))
        if constrained:
            if num_tags != 3:
                raise ValueError("BIO constraints need exactly 3 tags")
            trans_mask, start_mask = bio_constraints()
        else:
            trans_mask = torch.zeros(num_tags, num_tags, dtype=torch.bool)
            start_mask = torch.zeros(num_tags, dtype=torch.bool)
        self.register_buffer("trans_mask", trans_mask)
        self.register_buffer("start_mask", start_mask)

    def effective(self):
        return (self.transitions.masked_fill(self.trans_mask, FORBIDDEN),
                self.start.masked_fill(self.start_mask, FORBIDDEN),
                self.end)


def path_score(emissions, tags: Sequence[int], crf: CRF):
    trans, start, end = crf.effective()
    score = start[tags[0]] + emissions[0, tags[0]]
    for t in range(1, len(tags)):
        score = score + trans[tags[t - 1], tags[t]] + emissions[t, tags[t]]
    return score + end[tags[-1]]


def log_partition(emissions, crf: CRF, mask=None):
    """Forward algorithm. ``emissions`` is (L, T) or (B, L, T) with ``mask`` (B, L)."""
    single = emissions.dim() == 2
    if single:
        emissions = emissions[None]
    Bsz, L, T = emissions.shape
    if mask is None:
        mask = torch.ones(Bsz, L, dtype=torch.bool)
    trans, start, end = crf.effective()
    alpha = start[None] + emissions[:, 0]
    for t in range(1, L):
        nxt = torch.logsumexp(alpha[:, :, None] + trans[None] + emissions[:, t, None, :], dim=1)
        alpha = torch.where(mask[:, t, None], nxt, alpha)
    logz = torch.logsumexp(alpha + end[None], dim=-1)
    return logz[0] if single else logz


def crf_nll(emissions, tags, crf: CRF, mask=None):
    """``log Z - score(gold)``; batched inputs return the per-sequence vector."""
    if emissions.dim() == 2:
        if len(tags) != emissions.shape[0]:
            raise ValueError(f"tag length {len(tags)} != emission length {emissions.shape[0]}")
        return log_partition(emissions, crf) - path_score(emissions, list(tags), crf)
    tags = torch.as_tensor(tags)
    if tags.shape != emissions.shape[:2]:
        raise ValueError(f"tag shape {tuple(tags.shape)} != emission shape {tuple(emissions.shape[:2])}")
    Bsz, L, _ = emissions.shape
    if mask is None:
        mask = torch.ones(Bsz, L, dtype=torch.bool)
    trans, start, end = crf.effective()
    em = emissions.gather(2, tags[..., None])[..., 0]
    gold = start[tags[:, 0]] + em[:, 0]
    for t in range(1, L):
        step = trans[tags[:, t - 1], tags[:, t]] + em[:, t]
        gold = gold + torch.where(mask[:, t], step, torch.zeros_like(step))
    lengths = mask.sum(1)
    last = tags.gather(1, (lengths - 1)[:, None])[:, 0]
    gold = gold + end[last]
    return log_partition(emissions, crf, mask) - gold


def viterbi_decode(emissions, crf: CRF) -> tuple[list[int], float]:
    """Best tag path and its score; ties resolve to the lowest tag index at every backpointer."""
    trans, start, end = (x.detach().cpu().double().numpy() for x in crf.effective())
    em = emissions.detach().cpu().double().numpy() if isinstance(emissions, torch.Tensor) else np.asarray(emissions, float)
    L, T = em.shape
    if L < 1:
        raise ValueError("empty emission sequence")
    score = start + em[0]
    back = np.zeros((L, T), dtype=np.int64)
    for t in range(1, L):
        cand = score[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(T)] + em[t]
    score = score + end
    best = int(np.argmax(score))
    path = [best]
    for t in range(L - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1], float(score[best])


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    surface: str
    tokens: tuple[int, int]


def extract_spans(path: Sequence[int], text: str, offsets=None) -> list[Span]:
    """Maximal ``B I*`` runs as character spans of ``text``; a stray ``I`` opens a new span."""
    offsets = offsets if offsets is not None else tokenize_with_offsets(text)
    spans, begin = [], None

    def close(j):
        s, e = offsets[begin][1], offsets[j - 1][2]
        spans.append(Span(s, e, text[s:e], (begin, j)))

    for j, tag in enumerate(path):
        if tag == B or (tag == I and begin is None):
            if begin is not None:
                close(j)
            begin = j
        elif tag == O and begin is not None:
            close(j)
            begin = None
    if begin is not None:
        close(len(path))
    return spans


def tags_for_spans(offsets, char_spans: Sequence[tuple[int, int]]) -> list[int]:
    """BIO tags of tokens covered by character spans (a token belongs if it overlaps the span)."""
    tags = [O] * len(offsets)
    for s, e in char_spans:
        first = True
        for j, (_, ts, te) in enumerate(offsets):
            if ts < e and te > s:
                tags[j] = B if first else I
                first = False
    return tags


class SERTagger(nn.Module):
    """Utterance encoder -> linear emission layer -> CRF."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig, max_len: int | None = None):
        super().__init__()
        self.encoder = TransformerEncoder(vocab_size, cfg, max_len=max_len or cfg.max_utt_len)
        self.emit = nn.Linear(cfg.d, len(TAGS))
        self.crf = CRF(len(TAGS))
        nn.init.normal_(self.emit.weight, 0.0, cfg.init_std)
        nn.init.zeros_(self.emit.bias)

    def emissions(self, ids, mask):
        seg = torch.zeros_like(ids)
        return self.emit(self.encoder(ids, seg, mask))


def ser_emissions(token_ids: Sequence[int], tagger: SERTagger):
    ids = torch.tensor([list(token_ids)])
    return tagger.emissions(ids, torch.ones_like(ids, dtype=torch.bool))[0]


@dataclass
class SERExample:
    ids: list[int]
    tags: list[int]


def ser_examples(dialogues: Sequence[Dialogue], vocab: Vocab, max_len: int) -> list[SERExample]:
    out = []
    for d in dialogues:
        for u in d.utterances:
            offs = tokenize_with_offsets(u.text)[:max_len]
            if not offs:
                continue
            tags = tags_for_spans(offs, [(m.start, m.end) for m in d.mentions_in(u.index)])
            out.append(SERExample(vocab.encode([t for t, _, _ in offs]), tags))
    return out


# ---------------------------------------------------------------------------
# Standardizer

def _bucket(gram: str, dim: int) -> int:
    return int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little") % dim


def char_ngram_features(text: str, dim: int = 1 << 14, orders=(1, 2, 3)) -> np.ndarray:
    """L2-normalised hashed counts of character n-grams (lower-cased, word-boundary padded)."""
    s = f" {' '.join(text.lower().split())} "
    v = np.zeros(dim)
    for n in orders:
        for i in range(len(s) - n + 1):
            v[_bucket(f"{n}:{s[i:i + n]}", dim)] += 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm else v


@dataclass
class StandardizerModel:
    """Linear multiclass max-margin classifier over hashed character n-grams."""

    classes: list[str]
    dim: int = 1 << 14
    weights: np.ndarray | None = None
    epochs_run: int = 0
    history: list[float] = field(default_factory=list)

    def scores(self, surface: str) -> np.ndarray:
        return self.weights @ char_ngram_features(surface, self.dim)

    def fit(self, surfaces: Sequence[str], labels: Sequence[str], epochs: int = 30, lam: float = 1e-4,
            seed: int = 0) -> "StandardizerModel":
        """Pegasos-style SGD on the Crammer-Singer multiclass hinge loss."""
        index = {c: i for i, c in enumerate(self.classes)}
        X = np.stack([char_ngram_features(s, self.dim) for s in surfaces])
        y = np.array([index[c] for c in labels])
        # W = scale * V keeps the per-step shrinkage O(1)
        V = np.zeros((len(self.classes), self.dim))
        scale = 1.0
        rng = random.Random(seed)
        order = list(range(len(y)))
        step = 1
        for _ in range(epochs):
            rng.shuffle(order)
            violations = 0
            for i in order:
                step += 1
                eta = 1.0 / (lam * step)
                s = scale * (V @ X[i])
                s_true = s[y[i]]
                s[y[i]] = -np.inf
                r = int(np.argmax(s))
                scale *= 1.0 - eta * lam
                if s[r] + 1.0 > s_true:
                    violations += 1
                    V[y[i]] += (eta / scale) * X[i]
                    V[r] -= (eta / scale) * X[i]
                if scale < 1e-9:
                    V *= scale
                    scale = 1.0
            self.history.append(violations / len(y))
            self.epochs_run += 1
        self.weights = scale * V
        return self

    def save(self, path) -> None:
        np.savez(path, weights=self.weights, classes=np.array(self.classes), dim=self.dim)

    @classmethod
    def load(cls, path) -> "StandardizerModel":
        z = np.load(path, allow_pickle=False)
        return cls([str(c) for c in z["classes"]], int(z["dim"]), z["weights"])


def standardizer_training_pairs(catalog: SymptomCatalog, augment: int = 0, seed: int = 0):
    """(surface, canonical) pairs: identity pairs, aliases, plus ``augment`` noisy copies of each."""
    from .synthetic import perturb_surface

    base = [(c, c) for c in catalog.entries] + [(a, c) for a, c in catalog.aliases.items()]
    rng = random.Random(seed)
    extra = [(perturb_surface(s, rng), c) for s, c in base for _ in range(augment)]
    return base + extra


def train_standardizer(catalog: SymptomCatalog, augment: int = 8, seed: int = 0, epochs: int = 30) -> StandardizerModel:
    pairs = standardizer_training_pairs(catalog, augment, seed)
    return StandardizerModel(list(catalog.entries)).fit([s for s, _ in pairs], [c for _, c in pairs], epochs, seed=seed)


def standardize(surface: str, model: StandardizerModel) -> str:
    if not surface.strip():
        raise ValueError("empty surface form")
    return model.classes[int(np.argmax(model.scores(surface)))]
