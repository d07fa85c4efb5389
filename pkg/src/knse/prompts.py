"""Hypothesis templates (hard / soft prompt) and the cached symptom-knowledge store."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .corpus import SymptomCatalog
from .encoder import Vocab, tokenize

logger = logging.getLogger(__name__)

HARD_TEMPLATE = "The patient has a {}."
QUESTION_TEMPLATE = "Please briefly describe the {} symptom"
FALLBACK_TEMPLATE = "{} is a clinical symptom."
MAX_KNOWLEDGE_TOKENS = 64


@dataclass(frozen=True)
class HardPromptTemplate:
    pattern: str = HARD_TEMPLATE

    def __post_init__(self):
        if self.pattern.count("{}") != 1:
            raise ValueError(f"hard prompt template needs exactly one '{{}}' slot: {self.pattern!r}")

    def fill(self, symptom: str) -> str:
        return self.pattern.format(symptom)


@dataclass(frozen=True)
class SoftPromptConfig:
    a: int = 10
    b: int = 5

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError(f"soft prompt lengths must be >= 0, got a={self.a}, b={self.b}")


def make_hypothesis(symptom: str, mode: str, vocab: Vocab, catalog: SymptomCatalog | None = None,
                    template: HardPromptTemplate = HardPromptTemplate()) -> list[int]:
    """Token ids of the hypothesis that the patient has ``symptom``.

    ``hard`` fills the fixed template; ``soft`` wraps the symptom tokens with the vocabulary's
    trainable prefix/suffix prompt slots.
    """
    if catalog is not None and symptom not in catalog:
        raise ValueError(f"unknown symptom {symptom!r}")
    if mode == "hard":
        return vocab.encode(tokenize(template.fill(symptom)))
    if mode == "soft":
        return vocab.prefix_ids() + vocab.encode(tokenize(symptom)) + vocab.suffix_ids()
    raise ValueError(f"unknown prompt mode {mode!r}")


class KnowledgeProvider(Protocol):
    def generate(self, question: str) -> str: ...


class StaticProvider:
    """Answers questions from a fixed {symptom: text} table (the offline default)."""

    def __init__(self, table: dict[str, str], template: str = QUESTION_TEMPLATE):
        self._by_question = {template.format(k): v for k, v in table.items()}
        self.calls = 0

    @classmethod
    def from_file(cls, path, template: str = QUESTION_TEMPLATE) -> "StaticProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), template)

    def generate(self, question: str) -> str:
        self.calls += 1
        if question not in self._by_question:
            raise KeyError(question)
        return self._by_question[question]


class HTTPProvider:
    """Client for an external text-generation endpoint.

    Sends ``{"prompt": question}`` as JSON and reads the ``text`` field of the reply; the bearer
    token is taken from the environment variable named by ``token_env``.
    """

    def __init__(self, endpoint: str, token_env: str = "KNSE_PROVIDER_TOKEN", timeout: float = 30.0):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout

    def generate(self, question: str) -> str:
        import urllib.request

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=json.dumps({"prompt": question}).encode(),
                                     headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode())["text"]


@dataclass
class KnowledgeStore:
    cache: dict[str, str] = field(default_factory=dict)
    question_template: str = QUESTION_TEMPLATE
    provider: KnowledgeProvider | None = None
    max_tokens: int = MAX_KNOWLEDGE_TOKENS
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, path, provider: KnowledgeProvider | None = None) -> "KnowledgeStore":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), provider=provider)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.cache, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")

    def text(self, symptom: str) -> str:
        if symptom in self.cache:
            return self.cache[symptom]
        if self.provider is not None:
            try:
                answer = self.provider.generate(self.question_template.format(symptom))
            except Exception as e:  # provider failures degrade to the stub
                msg = f"knowledge provider failed for {symptom!r}: {e}"
                logger.warning(msg)
                self.warnings.append(msg)
            else:
                if tokenize(answer):
                    self.cache[symptom] = answer
                    return answer
                self.warnings.append(f"knowledge provider returned empty text for {symptom!r}")
        return FALLBACK_TEMPLATE.format(symptom)


def lookup_knowledge(symptom: str, store: KnowledgeStore) -> list[str]:
    return tokenize(store.text(symptom))[: store.max_tokens]


@dataclass
class PopulateReport:
    requested: int = 0
    filled: int = 0
    errors: dict[str, str] = field(default_factory=dict)


def populate_knowledge(catalog: SymptomCatalog, store: KnowledgeStore, provider: KnowledgeProvider):
    """Query ``provider`` for every catalog entry missing from the cache; already cached entries cost nothing."""
    report = PopulateReport()
    for symptom in catalog.entries:
        if symptom in store.cache:
            continue
        report.requested += 1
        try:
            answer = provider.generate(store.question_template.format(symptom))
            if not tokenize(answer):
                raise ValueError("empty answer")
        except Exception as e:
            report.errors[symptom] = str(e)
            continue
        store.cache[symptom] = answer
        report.filled += 1
    return store, report
