"""Knowledge/hypothesis-aware matching network over premise utterances.

Pipeline per (premise, hypothesis, knowledge) triplet::

    hidden   = encoder(triplet)
    C_hyp    = aggregate(utterances, hypothesis tokens, W_hyp)    # one vector per utterance
    C_hyp    = cross(self(C_hyp), hypothesis tokens)
    C_knw    = same with the knowledge tokens and W_knw
    h_hat    = BiGRU([C_hyp; C_knw]) final states
    logits   = head(h_hat)
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import STATUSES, Status
from .encoder import Batch, EncoderConfig, MultiHeadAttention, TokenSeq, TransformerEncoder, collate

NEG_INF = float("-inf")


def utterance_aggregate(H_P: list[torch.Tensor], H_Q: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Single-example aggregation: ``C[i] = sum_j softmax_j(max_k H_P[i][j] W H_Q[k]) H_P[i][j]``."""
    if H_Q.shape[0] == 0:
        raise ValueError("empty query")
    rows = []
    for i, U in enumerate(H_P):
        if U.shape[0] == 0:
            raise ValueError(f"utterance {i} has no tokens")
        # one reduction per (token, query) pair, so the scores do not depend on how many queries
        # share the call (a plain matmul may round differently as the query count changes)
        a = ((U @ W)[:, None, :] * H_Q[None, :, :]).sum(-1).max(dim=1).values
        p = torch.softmax(a, dim=0)
        rows.append(p @ U)
    return torch.stack(rows)


def aggregate_batched(H, utt_index, num_utt: int, Q, q_mask, W, return_weights: bool = False):
    """Batched aggregation.

    ``H`` (B, L, d) token states, ``utt_index`` (B, L) premise utterance of each token (-1 elsewhere),
    ``Q`` (B, Lq, d) query states with validity mask ``q_mask``. Returns (B, num_utt, d); rows for
    utterances a window does not have are zero.
    """
    scores = (H @ W) @ Q.transpose(1, 2)
    scores = scores.masked_fill(~q_mask[:, None, :], NEG_INF)
    a = scores.max(dim=-1).values                                   # (B, L)
    member = utt_index[:, None, :] == torch.arange(num_utt)[None, :, None]   # (B, n, L)
    present = member.any(-1)                                        # (B, n)
    logits = a[:, None, :].expand_as(member).masked_fill(~member, NEG_INF)
    logits = logits.masked_fill(~present[..., None], 0.0)
    p = torch.softmax(logits, dim=-1) * member
    C = p @ H
    return (C, p) if return_weights else C


class AttentionBlock(nn.Module):
    """``LayerNorm(x + MultiHeadAttention(x, y, y))``."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads)
        self.norm = nn.LayerNorm(d)

    def forward(self, x, y, key_mask=None, return_weights: bool = False):
        a, w = self.attn(x, y, key_mask)
        out = self.norm(x + a)
        return (out, w) if return_weights else out


def self_attend(C, block: AttentionBlock, utt_mask=None):
    return block(C, C, utt_mask)


def cross_attend(C_sa, H_Q, block: AttentionBlock, q_mask=None):
    return block(C_sa, H_Q, q_mask)


class GRUCell(nn.Module):
    def __init__(self, input_size: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.ih = nn.Linear(input_size, 3 * hidden)
        self.hh = nn.Linear(hidden, 3 * hidden)

    def forward(self, x, h):
        gi = self.ih(x).chunk(3, -1)
        gh = self.hh(h).chunk(3, -1)
        r = torch.sigmoid(gi[0] + gh[0])
        z = torch.sigmoid(gi[1] + gh[1])
        n = torch.tanh(gi[2] + r * gh[2])
        return (1 - z) * n + z * h, (r, z)


class BiGRU(nn.Module):
    """Bidirectional GRU over utterance vectors; returns the two final states concatenated."""

    def __init__(self, input_size: int, hidden: int):
        super().__init__()
        self.fwd = GRUCell(input_size, hidden)
        self.bwd = GRUCell(input_size, hidden)

    def forward(self, x, mask=None, return_gates: bool = False):
        B, T, _ = x.shape
        if mask is None:
            mask = torch.ones(B, T, dtype=torch.bool)
        gates = []
        h_f = x.new_zeros(B, self.fwd.hidden)
        for t in range(T):
            new, g = self.fwd(x[:, t], h_f)
            h_f = torch.where(mask[:, t, None], new, h_f)
            gates.append(g)
        h_b = x.new_zeros(B, self.bwd.hidden)
        for t in reversed(range(T)):
            new, g = self.bwd(x[:, t], h_b)
            h_b = torch.where(mask[:, t, None], new, h_b)
            gates.append(g)
        out = torch.cat([h_f, h_b], dim=-1)
        return (out, gates) if return_gates else out


def gru_track(C_hyp_ca, C_knw_ca, gru: BiGRU, mask=None):
    if C_hyp_ca.shape[:-1] != C_knw_ca.shape[:-1]:
        raise ValueError(f"utterance counts differ: {tuple(C_hyp_ca.shape)} vs {tuple(C_knw_ca.shape)}")
    return gru(torch.cat([C_hyp_ca, C_knw_ca], dim=-1), mask)


@dataclass
class MatchFeatures:
    C_hyp: torch.Tensor
    C_hyp_sa: torch.Tensor
    C_hyp_ca: torch.Tensor
    C_knw_ca: torch.Tensor
    h_hat: torch.Tensor
    p_hyp: torch.Tensor
    p_knw: torch.Tensor | None = None


@dataclass
class StatusDistribution:
    logits: torch.Tensor
    probabilities: torch.Tensor

    @property
    def status(self) -> Status:
        return STATUSES[int(torch.argmax(self.probabilities))]


class KNSEModel(nn.Module):
    """Encoder plus matching network; ``mode='encoder_only'`` classifies from the [CLS] state."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig, num_prompts: int = 0, prompt_offset: int = 0,
                 tie_branches: bool = False):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.tie_branches = tie_branches
        self.encoder = TransformerEncoder(vocab_size, cfg, num_prompts, prompt_offset)
        self.W_hyp = nn.Parameter(torch.empty(d, d))
        self.W_knw = None if tie_branches else nn.Parameter(torch.empty(d, d))
        self.sa = AttentionBlock(d, cfg.heads)
        self.ca_hyp = AttentionBlock(d, cfg.heads)
        self.ca_knw = None if tie_branches else AttentionBlock(d, cfg.heads)
        self.gru = BiGRU(2 * d, d)
        self.head = nn.Linear(2 * d, len(STATUSES))
        self.cls_head = nn.Linear(d, len(STATUSES))
        std = cfg.init_std
        for name, p in self.named_parameters():
            if name.startswith("encoder."):
                continue
            if p.dim() >= 2:
                nn.init.normal_(p, 0.0, std)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
        # Matching starts lexical: the bilinear maps begin near a (soft) dot product and the
        # cross-attention queries/keys near identity, so an untrained encoder already ties
        # premise tokens to identical hypothesis/knowledge tokens.
        with torch.no_grad():
            for W in (self.W_hyp, self.W_knw):
                if W is not None:
                    W.add_(torch.eye(d) * cfg.match_init_scale / d)
            for blk in (self.ca_hyp, self.ca_knw):
                if blk is not None:
                    blk.attn.q.weight.copy_(torch.eye(d))
                    blk.attn.k.weight.copy_(torch.eye(d))

    def branch(self, H, batch: Batch, q_mask, W, ca: AttentionBlock, utt_mask):
        C, p = aggregate_batched(H, batch.utt_index, batch.num_utt, H, q_mask, W, return_weights=True)
        C_sa = self_attend(C, self.sa, utt_mask)
        C_ca = cross_attend(C_sa, H, ca, q_mask)
        return C, C_sa, C_ca, p

    def forward(self, batch: Batch, mode: str = "full", use_knowledge: bool = True, return_features: bool = False):
        H = self.encoder(batch.ids, batch.segment, batch.pad_mask)
        if mode == "encoder_only":
            return self.cls_head(H[:, 0])
        if mode != "full":
            raise ValueError(f"unknown matcher mode {mode!r}")
        present = batch.utt_index[:, None, :] == torch.arange(batch.num_utt)[None, :, None]
        utt_mask = present.any(-1)
        C, C_sa, C_hyp_ca, p_hyp = self.branch(H, batch, batch.hyp_mask, self.W_hyp, self.ca_hyp, utt_mask)
        p_knw = None
        if use_knowledge:
            W = self.W_hyp if self.tie_branches else self.W_knw
            ca = self.ca_hyp if self.tie_branches else self.ca_knw
            _, _, C_knw_ca, p_knw = self.branch(H, batch, batch.knw_mask, W, ca, utt_mask)
        else:
            C_knw_ca = torch.zeros_like(C_hyp_ca)
        h_hat = gru_track(C_hyp_ca, C_knw_ca, self.gru, utt_mask)
        logits = self.head(h_hat)
        if return_features:
            return logits, MatchFeatures(C, C_sa, C_hyp_ca, C_knw_ca, h_hat, p_hyp, p_knw)
        return logits


def knse_forward(seq: TokenSeq, model: KNSEModel, sep_id: int, mode: str = "full",
                 use_knowledge: bool = True) -> StatusDistribution:
    logits = model(collate([seq], sep_id), mode, use_knowledge)[0]
    return StatusDistribution(logits, torch.softmax(logits, -1))


def ssr_loss(logits: torch.Tensor, gold) -> torch.Tensor:
    """Mean cross-entropy; ``gold`` is a Status, a list of them, or a tensor of class indices."""
    if isinstance(logits, StatusDistribution):
        logits = logits.logits
    if isinstance(gold, Status):
        gold = [gold]
    if not isinstance(gold, torch.Tensor):
        gold = torch.tensor([g.index for g in gold])
    if logits.dim() == 1:
        logits = logits[None]
    return F.cross_entropy(logits, gold)
