import sys
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from knse.corpus import Dialogue, Speaker, Status, SymptomCatalog, SymptomMention, Utterance
from knse.encoder import EncoderConfig, Vocab
from knse.prompts import KnowledgeStore
from knse.synthetic import GeneratorConfig, generate_synthetic_corpus, synthetic_catalog, synthetic_knowledge

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


def make_dialogue(texts, mentions=(), did="d0", disease="flu"):
    """``texts``: list of (speaker, text); ``mentions``: (utt, surface, canonical, status)."""
    utts = tuple(Utterance(Speaker(s), t, i) for i, (s, t) in enumerate(texts))
    ms = []
    for utt, surface, canonical, status in mentions:
        start = utts[utt].text.index(surface)
        ms.append(SymptomMention(utt, start, start + len(surface), surface, canonical, status))
    return Dialogue(did, disease, utts, tuple(ms))


@pytest.fixture
def cough_dialogue():
    return make_dialogue(
        [("Patient", "Hello doctor."), ("Doctor", "Do you have a cough?"), ("Patient", "Yes."),
         ("Doctor", "Any fever?"), ("Patient", "No fever at all.")],
        [(1, "cough", "cough", Status.POSITIVE), (4, "fever", "fever", Status.NEGATIVE)],
    )


@pytest.fixture
def tiny_catalog():
    return SymptomCatalog(["cough", "fever", "headache"], {"coughing": "cough", "feverish": "fever"})


@pytest.fixture(scope="session")
def small_synthetic():
    cfg = GeneratorConfig(num_dialogues=40, catalog_size=12, seed=3)
    corpus = generate_synthetic_corpus(cfg)
    catalog = synthetic_catalog(cfg)
    store = KnowledgeStore(synthetic_knowledge(catalog))
    return cfg, corpus, catalog, store


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(d=8, layers=1, heads=1, ff_mult=2, max_premise_len=40, max_hypothesis_len=12,
                         max_knowledge_len=12, dropout=0.0)


@pytest.fixture
def small_vocab(small_synthetic):
    _, corpus, catalog, store = small_synthetic
    from knse.experiments import build_vocab
    return build_vocab(corpus, catalog, store, 2, 1)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines, which are otherwise hidden by output capture."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("[criterion ")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(ln)
