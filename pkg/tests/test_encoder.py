import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_dialogue
from knse.corpus import slide_windows
from knse.encoder import (CLS, HYPOTHESIS, KNOWLEDGE, PREMISE, SEP, UNK, UTT_DOC, UTT_PAT, EncoderConfig,
                          TransformerEncoder, Vocab, build_triplet, collate, encode_triplet, sinusoid_table,
                          tokenize, tokenize_with_offsets)


def test_tokenize_examples():
    assert tokenize("") == []
    assert tokenize("no cough") == ["no", "cough"]
    assert tokenize("No cough, doctor.") == ["No", "cough", ",", "doctor", "."]
    assert tokenize("不发烧") == ["不", "发", "烧"]


@given(st.text(max_size=60))
def test_offsets_point_at_tokens(text):
    for tok, s, e in tokenize_with_offsets(text):
        assert text[s:e] == tok
        assert tok.strip() == tok and tok


def test_vocab_layout_and_unk(tmp_path):
    v = Vocab.build(["Cough and fever"], prompt_prefix=3, prompt_suffix=2)
    assert v.prefix_ids() == [v.prompt_offset, v.prompt_offset + 1, v.prompt_offset + 2]
    assert len(v.suffix_ids()) == 2
    assert v["COUGH"] == v["cough"]
    assert v["sneeze"] == v[UNK]
    v.save(tmp_path / "vocab.txt")
    w = Vocab.load(tmp_path / "vocab.txt")
    assert w.itos == v.itos and (w.prompt_prefix, w.prompt_suffix) == (3, 2)


def _cfg(**kw):
    base = dict(d=8, layers=1, heads=1, ff_mult=2, max_premise_len=60, max_hypothesis_len=10, max_knowledge_len=64,
                dropout=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def _vocab(*texts):
    return Vocab.build(list(texts) + ["the patient has a cough"])


def test_two_utterances_two_role_tokens():
    d = make_dialogue([("Doctor", "Do you cough?"), ("Patient", "Yes.")])
    w = slide_windows(d, 5)[-1]
    v = _vocab("Do you cough? Yes.")
    seq = build_triplet(w, v.encode(["cough"]), None, v, _cfg())
    premise = [t for t, s in zip(seq.ids, seq.segment) if s == PREMISE]
    assert sum(t in (v[UTT_DOC], v[UTT_PAT]) for t in premise) == 2
    assert seq.ids[0] == v[CLS]
    assert seq.ids.count(v[SEP]) == 2


def test_utterance_truncated_to_max_len():
    text = " ".join(f"w{i}" for i in range(60))
    d = make_dialogue([("Patient", text)])
    v = _vocab(text)
    seq = build_triplet(slide_windows(d, 5)[0], [v["cough"]], None, v, _cfg(max_utt_len=50, max_premise_len=256))
    assert sum(1 for u in seq.utt_index if u == 0) == 51  # role token + 50


def test_premise_drops_oldest_first():
    texts = [("Patient", " ".join(f"a{i}" for i in range(20))), ("Doctor", "recent question here"),
             ("Patient", "latest answer")]
    d = make_dialogue(texts)
    v = _vocab(*[t for _, t in texts])
    seq = build_triplet(slide_windows(d, 5)[-1], [v["cough"]], None, v, _cfg(max_premise_len=12))
    assert seq.meta["dropped_utterances"] == 1
    assert v["a0"] not in seq.ids
    assert v["latest"] in seq.ids


def test_knowledge_truncated_to_64():
    d = make_dialogue([("Patient", "cough")])
    v = _vocab("cough")
    seq = build_triplet(slide_windows(d, 5)[0], [v["cough"]], [v["cough"]] * 80, v, _cfg())
    assert sum(1 for s in seq.segment if s == KNOWLEDGE) == 64 + 1  # plus closing [SEP]
    assert seq.segment.count(HYPOTHESIS) == 2


def test_output_width_and_parts():
    d = make_dialogue([("Doctor", "Any cough?"), ("Patient", "Yes.")])
    v = _vocab("Any cough? Yes.")
    cfg = _cfg()
    enc = TransformerEncoder(len(v), cfg)
    seq = build_triplet(slide_windows(d, 5)[-1], v.encode(["cough"]), v.encode(["a", "cough"]), v, cfg)
    hs = encode_triplet(seq, enc, v[SEP])
    assert all(h.shape[1] == 8 for h in hs.H_P)
    assert hs.H_H.shape == (1, 8) and hs.H_K.shape == (2, 8) and hs.cls.shape == (8,)
    assert [h.shape[0] for h in hs.H_P] == [4, 3]  # role token + "Any cough ?" / "Yes ."


def test_padding_invariance():
    torch.manual_seed(0)
    cfg = _cfg(d=16, layers=2, heads=2)
    enc = TransformerEncoder(30, cfg).eval()
    ids = torch.randint(6, 30, (1, 7))
    seg = torch.zeros_like(ids)
    mask = torch.ones_like(ids, dtype=torch.bool)
    out1 = enc(ids, seg, mask)
    ids2 = torch.cat([ids, torch.zeros(1, 5, dtype=torch.long)], 1)
    mask2 = torch.cat([mask, torch.zeros(1, 5, dtype=torch.bool)], 1)
    out2 = enc(ids2, torch.zeros_like(ids2), mask2)
    assert torch.allclose(out1, out2[:, :7], atol=1e-6)


def test_attention_rows_sum_to_one():
    torch.manual_seed(1)
    enc = TransformerEncoder(30, _cfg(d=16, heads=4)).eval()
    ids = torch.randint(6, 30, (2, 9))
    mask = torch.ones_like(ids, dtype=torch.bool)
    mask[1, 6:] = False
    _, attns = enc(ids, torch.zeros_like(ids), mask, return_attention=True)
    for a in attns:
        assert torch.allclose(a.sum(-1), torch.ones(a.shape[:-1]), atol=1e-6)
        assert torch.all(a[1, :, :, 6:] == 0)


def test_encoder_deterministic():
    torch.manual_seed(2)
    enc = TransformerEncoder(30, _cfg()).eval()
    ids = torch.randint(6, 30, (1, 5))
    args = (ids, torch.zeros_like(ids), torch.ones_like(ids, dtype=torch.bool))
    assert torch.equal(enc(*args), enc(*args))


def test_soft_prompt_rows_replace_token_rows():
    torch.manual_seed(3)
    enc = TransformerEncoder(30, _cfg(), num_prompts=2, prompt_offset=6)
    ids = torch.tensor([[6, 7, 10]])
    x = enc.embed(ids, torch.zeros_like(ids))
    pos = enc.pos(torch.arange(3)) + enc.seg(torch.zeros(3, dtype=torch.long))
    assert torch.allclose(x[0, 0] - pos[0], enc.prompt[0])
    assert torch.allclose(x[0, 2] - pos[2], enc.tok.weight[10])


def test_sequence_too_long_rejected():
    enc = TransformerEncoder(30, _cfg(), max_len=4)
    ids = torch.ones(1, 5, dtype=torch.long)
    with pytest.raises(ValueError, match="max_len"):
        enc(ids, torch.zeros_like(ids), torch.ones_like(ids, dtype=torch.bool))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(d=10, heads=3).validate()
    with pytest.raises(ValueError, match="dropout"):
        EncoderConfig(dropout=1.0).validate()


def test_init_statistics():
    torch.manual_seed(0)
    cfg = EncoderConfig()
    enc = TransformerEncoder(500, cfg)
    assert abs(enc.layers[0].attn.q.weight.std().item() - 0.02) < 0.003
    assert abs(enc.tok.weight.std().item() - cfg.tok_init_std) < 0.05
    assert torch.allclose(enc.pos.weight, sinusoid_table(cfg.max_len, cfg.d) * cfg.pos_init_scale)


def test_collate_masks():
    d = make_dialogue([("Patient", "cough now")])
    v = _vocab("cough now")
    cfg = _cfg()
    w = slide_windows(d, 5)[0]
    a = build_triplet(w, v.encode(["cough"]), v.encode(["a"]), v, cfg)
    b = build_triplet(w, v.encode(["the", "cough"]), None, v, cfg)
    batch = collate([a, b], v[SEP])
    assert batch.ids.shape == (2, max(len(a), len(b)))
    assert batch.hyp_mask.sum(1).tolist() == [1, 2]
    assert batch.knw_mask.sum(1).tolist() == [1, 0]
    assert batch.num_utt == 1
