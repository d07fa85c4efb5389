"""Tokenizer, vocabulary, triplet layout and a small pre-norm transformer encoder."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import DialogueWindow, Speaker

PAD, UNK, CLS, SEP, UTT_DOC, UTT_PAT = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[DOC]", "[PAT]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, UTT_DOC, UTT_PAT)

PREMISE, HYPOTHESIS, KNOWLEDGE = 0, 1, 2

_CJK = "㐀-䶿一-鿿豈-﫿"
_TOKEN_RE = re.compile(rf"[{_CJK}]|[^\W{_CJK}]+|[^\w\s]")


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Tokens with character offsets: CJK characters singly, word runs, lone punctuation marks."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str) -> list[str]:
    return [t for t, _, _ in tokenize_with_offsets(text)]


class Vocab:
    """Dense token ids: special tokens, then soft-prompt slots, then lower-cased content tokens."""

    def __init__(self, tokens: Iterable[str] = (), prompt_prefix: int = 0, prompt_suffix: int = 0):
        self.prompt_prefix = prompt_prefix
        self.prompt_suffix = prompt_suffix
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.itos += [f"[P{i + 1}]" for i in range(prompt_prefix)]
        self.itos += [f"[P'{i + 1}]" for i in range(prompt_suffix)]
        self.num_reserved = len(self.itos)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    @classmethod
    def build(cls, texts: Iterable[str], prompt_prefix: int = 0, prompt_suffix: int = 0) -> "Vocab":
        counts = Counter(t.lower() for text in texts for t in tokenize(text))
        return cls(sorted(counts), prompt_prefix, prompt_suffix)

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        if token in self.stoi and token in SPECIAL_TOKENS:
            return self.stoi[token]
        return self.stoi.get(token.lower(), self.stoi[UNK])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self[t] for t in tokens]

    @property
    def prompt_offset(self) -> int:
        return len(SPECIAL_TOKENS)

    @property
    def num_prompts(self) -> int:
        return self.prompt_prefix + self.prompt_suffix

    def prefix_ids(self) -> list[int]:
        return list(range(self.prompt_offset, self.prompt_offset + self.prompt_prefix))

    def suffix_ids(self) -> list[int]:
        start = self.prompt_offset + self.prompt_prefix
        return list(range(start, start + self.prompt_suffix))

    def save(self, path) -> None:
        lines = [f"{t}\t{i}" for i, t in enumerate(self.itos)]
        header = f"#prompts\t{self.prompt_prefix}\t{self.prompt_suffix}"
        Path(path).write_text("\n".join([header] + lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        _, a, b = lines[0].split("\t")
        v = cls((), int(a), int(b))
        for line in lines[1 + v.num_reserved:]:
            tok, idx = line.rsplit("\t", 1)
            if v.add(tok) != int(idx):
                raise ValueError(f"vocab file {path}: non-dense id {idx} for {tok!r}")
        return v


@dataclass
class EncoderConfig:
    d: int = 64
    layers: int = 2
    heads: int = 2
    ff_mult: int = 4
    max_utt_len: int = 50
    max_premise_len: int = 256
    max_hypothesis_len: int = 32
    max_knowledge_len: int = 64
    init_std: float = 0.02
    # token rows start larger than position/segment rows so token identity dominates early
    tok_init_std: float = 1.0
    # learned positions start from a sinusoid table of this amplitude (0 -> plain normal init)
    pos_init_scale: float = 0.5
    # matching maps start at identity * match_init_scale / d on top of the normal init
    match_init_scale: float = 2.0
    dropout: float = 0.1

    @property
    def max_len(self) -> int:
        # [CLS] premise [SEP] hypothesis [SEP] knowledge [SEP]
        return 4 + self.max_premise_len + self.max_hypothesis_len + self.max_knowledge_len

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"encoder config: dropout must be in [0, 1), got {self.dropout}")
        for name in ("d", "layers", "heads", "max_utt_len", "max_premise_len", "max_hypothesis_len",
                     "max_knowledge_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder config: {name} must be >= 1")


@dataclass
class TokenSeq:
    ids: list[int]
    segment: list[int]
    utt_index: list[int]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_utterances(self) -> int:
        return max(self.utt_index) + 1


def build_triplet(window: DialogueWindow, hypothesis: Sequence[int], knowledge: Sequence[int] | None,
                  vocab: Vocab, cfg: EncoderConfig) -> TokenSeq:
    """Lay out ``[CLS] premise [SEP] hypothesis [SEP] knowledge [SEP]``.

    Each premise utterance is prefixed by its speaker-role token and cut to ``max_utt_len`` content
    tokens; whole utterances are then dropped oldest-first until the premise fits. With
    ``knowledge=None`` the trailing knowledge part and its separator are omitted.
    """
    if not window.utterances:
        raise ValueError(f"window {window.id} has an empty premise")
    utts = []
    for u in window.utterances:
        role = vocab[UTT_DOC] if u.speaker == Speaker.DOCTOR else vocab[UTT_PAT]
        utts.append([role] + vocab.encode(tokenize(u.text))[: cfg.max_utt_len])
    while len(utts) > 1 and sum(map(len, utts)) > cfg.max_premise_len:
        utts.pop(0)
    if sum(map(len, utts)) > cfg.max_premise_len:
        utts[0] = utts[0][: cfg.max_premise_len]
    ids, seg, utt_idx = [vocab[CLS]], [PREMISE], [-1]
    for i, toks in enumerate(utts):
        ids += toks
        seg += [PREMISE] * len(toks)
        utt_idx += [i] * len(toks)
    hyp = list(hypothesis)[: cfg.max_hypothesis_len]
    parts = [(vocab[SEP], PREMISE), *[(t, HYPOTHESIS) for t in hyp], (vocab[SEP], HYPOTHESIS)]
    if knowledge is not None:
        parts += [(t, KNOWLEDGE) for t in list(knowledge)[: cfg.max_knowledge_len]]
        parts.append((vocab[SEP], KNOWLEDGE))
    for t, s in parts:
        ids.append(t)
        seg.append(s)
        utt_idx.append(-1)
    return TokenSeq(ids, seg, utt_idx, {"window": window.id, "dropped_utterances": len(window.utterances) - len(utts)})


@dataclass
class Batch:
    ids: torch.Tensor        # (B, L) long
    segment: torch.Tensor    # (B, L) long
    utt_index: torch.Tensor  # (B, L) long, -1 outside the premise
    pad_mask: torch.Tensor   # (B, L) bool, True on real tokens
    hyp_mask: torch.Tensor   # (B, L) bool, hypothesis content tokens
    knw_mask: torch.Tensor   # (B, L) bool, knowledge content tokens
    num_utt: int

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(seqs: Sequence[TokenSeq], sep_id: int) -> Batch:
    L = max(len(s) for s in seqs)
    B = len(seqs)
    ids = torch.zeros(B, L, dtype=torch.long)
    seg = torch.zeros(B, L, dtype=torch.long)
    utt = torch.full((B, L), -1, dtype=torch.long)
    pad = torch.zeros(B, L, dtype=torch.bool)
    for b, s in enumerate(seqs):
        n = len(s)
        ids[b, :n] = torch.tensor(s.ids)
        seg[b, :n] = torch.tensor(s.segment)
        utt[b, :n] = torch.tensor(s.utt_index)
        pad[b, :n] = True
    content = pad & (ids != sep_id)
    return Batch(ids, seg, utt, pad, content & (seg == HYPOTHESIS), content & (seg == KNOWLEDGE),
                 int(utt.max().item()) + 1)


def sinusoid_table(length: int, d: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    freq = torch.pow(10000.0, torch.arange(0, d, 2, dtype=torch.float32) / d)
    table = torch.zeros(length, d)
    table[:, 0::2] = torch.sin(pos / freq)
    table[:, 1::2] = torch.cos(pos / freq)[:, : d // 2]
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x, y, key_mask=None):
        """``x`` (B, Lq, d) attends over ``y`` (B, Lk, d); ``key_mask`` (B, Lk) is True on valid keys."""
        B, Lq, d = x.shape
        Lk = y.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(y).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v(y).view(B, Lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, Lq, d)
        return self.out(ctx), attn


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Linear(ff, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        a, attn = self.attn(h, h, mask)
        x = x + self.drop(a)
        x = x + self.drop(self.ff(self.norm2(x)))
        return x, attn


class TransformerEncoder(nn.Module):
    """Token + learned position + segment embeddings, then pre-norm self-attention blocks.

    Soft-prompt slots live in their own ``prompt`` table; their rows in ``tok`` are never read.
    """

    def __init__(self, vocab_size: int, cfg: EncoderConfig, num_prompts: int = 0, prompt_offset: int = 0,
                 max_len: int | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.max_len = max_len or cfg.max_len
        self.prompt_offset = prompt_offset
        self.num_prompts = num_prompts
        self.tok = nn.Embedding(vocab_size, cfg.d)
        self.pos = nn.Embedding(self.max_len, cfg.d)
        self.seg = nn.Embedding(3, cfg.d)
        self.prompt = nn.Parameter(torch.empty(num_prompts, cfg.d)) if num_prompts else None
        self.layers = nn.ModuleList(EncoderLayer(cfg.d, cfg.heads, cfg.ff_mult * cfg.d, cfg.dropout)
                                    for _ in range(cfg.layers))
        self.drop = nn.Dropout(cfg.dropout)
        self.norm = nn.LayerNorm(cfg.d)
        self.reset_parameters()

    def reset_parameters(self):
        std = self.cfg.init_std
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                nn.init.normal_(p, 0.0, std)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
        nn.init.normal_(self.tok.weight, 0.0, self.cfg.tok_init_std)
        if self.cfg.pos_init_scale > 0:
            with torch.no_grad():
                self.pos.weight.copy_(sinusoid_table(self.max_len, self.cfg.d) * self.cfg.pos_init_scale)

    def embed(self, ids, segment):
        L = ids.shape[1]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.max_len}")
        x = self.tok(ids)
        if self.prompt is not None:
            slot = ids - self.prompt_offset
            is_prompt = (slot >= 0) & (slot < self.num_prompts)
            if bool(is_prompt.any()):
                p = self.prompt[slot.clamp(0, self.num_prompts - 1)]
                x = torch.where(is_prompt[..., None], p, x)
        pos = torch.arange(L, device=ids.device)
        return x + self.pos(pos)[None] + self.seg(segment)

    def forward(self, ids, segment, pad_mask, return_attention: bool = False):
        x = self.drop(self.embed(ids, segment))
        attns = []
        for layer in self.layers:
            x, a = layer(x, pad_mask)
            attns.append(a)
        x = self.norm(x)
        return (x, attns) if return_attention else x


@dataclass
class HiddenStates:
    H_P: list[torch.Tensor]  # per utterance, (tokens_i, d)
    H_H: torch.Tensor
    H_K: torch.Tensor
    cls: torch.Tensor


def split_hidden(hidden: torch.Tensor, seq: TokenSeq, sep_id: int) -> HiddenStates:
    """Regroup one sequence's hidden states (L, d) by part and premise utterance."""
    utt = torch.tensor(seq.utt_index)
    seg = torch.tensor(seq.segment)
    content = torch.tensor(seq.ids) != sep_id
    n = seq.num_utterances
    H_P = [hidden[: len(seq)][utt == i] for i in range(n)]
    H_H = hidden[: len(seq)][(seg == HYPOTHESIS) & content]
    H_K = hidden[: len(seq)][(seg == KNOWLEDGE) & content]
    return HiddenStates(H_P, H_H, H_K, hidden[0])


def encode_triplet(seq: TokenSeq, encoder: TransformerEncoder, sep_id: int) -> HiddenStates:
    if len(seq) > encoder.max_len:
        raise ValueError(f"sequence length {len(seq)} exceeds max_len {encoder.max_len}")
    b = collate([seq], sep_id)
    hidden = encoder(b.ids, b.segment, b.pad_mask)[0]
    return split_hidden(hidden, seq, sep_id)
