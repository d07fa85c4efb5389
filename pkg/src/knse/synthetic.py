"""Scripted doctor/patient dialogue generator used as a desk-scale corpus.

Symptoms are grouped into body-system clusters; every disease draws its symptoms from one
cluster, so symptom co-occurrence stays inside a cluster and symptom-disjoint splits keep
most dialogues.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import Dialogue, Speaker, Status, STATUSES, SymptomCatalog, SymptomMention, Utterance

# cluster -> [(canonical, [aliases])]
SYMPTOM_CLUSTERS: dict[str, list[tuple[str, list[str]]]] = {
    "respiratory": [
        ("cough", ["coughing", "dry cough"]),
        ("fever", ["high temperature", "feverish"]),
        ("sore throat", ["throat pain", "scratchy throat"]),
        ("runny nose", ["nasal discharge", "running nose"]),
        ("wheezing", ["whistling breath", "wheeze"]),
        ("sneezing", ["sneezes", "frequent sneezing"]),
    ],
    "digestive": [
        ("nausea", ["queasiness", "feeling sick"]),
        ("vomiting", ["throwing up", "vomit"]),
        ("diarrhea", ["loose stools", "watery stool"]),
        ("stomach ache", ["belly pain", "abdominal pain"]),
        ("bloating", ["swollen belly", "gassiness"]),
        ("constipation", ["hard stools", "difficulty passing stool"]),
    ],
    "neurological": [
        ("headache", ["head pain", "migraine"]),
        ("dizziness", ["lightheadedness", "vertigo"]),
        ("fatigue", ["tiredness", "exhaustion"]),
        ("insomnia", ["sleeplessness", "trouble sleeping"]),
        ("numbness", ["tingling", "pins and needles"]),
        ("blurred vision", ["blurry vision", "fuzzy sight"]),
    ],
    "dermatological": [
        ("rash", ["skin rash", "red spots"]),
        ("itching", ["itchy skin", "pruritus"]),
        ("hives", ["welts", "raised bumps"]),
        ("dry skin", ["flaky skin", "scaly skin"]),
        ("bruising", ["bruises", "easy bruising"]),
        ("sweating", ["night sweats", "perspiration"]),
    ],
    "musculoskeletal": [
        ("back pain", ["backache", "lower back pain"]),
        ("joint pain", ["aching joints", "arthralgia"]),
        ("muscle cramps", ["cramping", "muscle spasms"]),
        ("stiff neck", ["neck stiffness", "rigid neck"]),
        ("swelling", ["puffiness", "edema"]),
        ("weakness", ["feebleness", "loss of strength"]),
    ],
    "cardiac": [
        ("chest pain", ["chest tightness", "pain in the chest"]),
        ("palpitations", ["racing heart", "pounding heartbeat"]),
        ("shortness of breath", ["breathlessness", "difficulty breathing"]),
        ("fainting", ["passing out", "syncope"]),
        ("cold hands", ["chilly fingers", "icy hands"]),
        ("leg swelling", ["swollen legs", "puffy ankles"]),
    ],
    "urinary": [
        ("frequent urination", ["peeing often", "urinary frequency"]),
        ("painful urination", ["burning urination", "dysuria"]),
        ("blood in urine", ["hematuria", "red urine"]),
        ("flank pain", ["side pain", "kidney pain"]),
        ("thirst", ["excessive thirst", "dry mouth"]),
        ("incontinence", ["leaking urine", "bladder leakage"]),
    ],
    "ent": [
        ("ear pain", ["earache", "sore ear"]),
        ("hearing loss", ["muffled hearing", "deafness"]),
        ("tinnitus", ["ringing ears", "buzzing in the ears"]),
        ("nosebleed", ["bloody nose", "epistaxis"]),
        ("hoarseness", ["hoarse voice", "raspy voice"]),
        ("toothache", ["tooth pain", "dental pain"]),
    ],
}

CLUSTER_BLURBS = {
    "respiratory": "It affects the airways.",
    "digestive": "It affects the stomach or bowels.",
    "neurological": "It affects the brain or nerves.",
    "dermatological": "It affects the skin.",
    "musculoskeletal": "It affects muscles or joints.",
    "cardiac": "It affects the heart or circulation.",
    "urinary": "It affects the kidneys or bladder.",
    "ent": "It affects the ears, nose or throat.",
}

QUESTION_TEMPLATES = [
    "Do you have {}?",
    "Have you had any {} recently?",
    "What about {}?",
    "Is there any {}?",
]
ANSWER_TEMPLATES = {
    Status.POSITIVE: ["Yes.", "Yes, quite often.", "Yes, it started yesterday.", "I do, yes."],
    Status.NEGATIVE: ["No.", "No, not at all.", "Never.", "No, I do not."],
    Status.UNKNOWN: ["I am not sure.", "Hard to say.", "I do not remember.", "Maybe, I cannot tell."],
}
STATEMENT_TEMPLATES = {
    Status.POSITIVE: ["I have {}.", "I have been having {} lately.", "My main problem is {}.", "There is some {} too."],
    Status.NEGATIVE: ["I do not have {}.", "There is no {} at all.", "I have not had any {}.", "No {} so far."],
    Status.UNKNOWN: ["I am not sure if I have {}.", "I cannot tell whether there is {}.", "I do not know about {}.",
                     "Perhaps {}, I am not certain."],
}
CONJ_STATUS = {
    Status.POSITIVE: ["and also {}", "plus some {}"],
    Status.NEGATIVE: ["but no {}", "though without {}"],
    Status.UNKNOWN: ["and maybe {}, not sure", "and possibly {}, hard to say"],
}
OPEN_PROMPTS = ["Any other symptoms?", "How are you feeling otherwise?", "Tell me more about how you feel.",
                "Anything else bothering you?"]
GREETINGS = [("Patient", "Hello doctor, I have not been feeling well."),
             ("Patient", "Good morning doctor, I need some advice."),
             ("Patient", "Hi doctor, something is wrong with me.")]
GREETING_REPLIES = ["Hello, what seems to be the problem?", "Sure, please describe your situation.",
                    "Alright, let us go through your symptoms."]
FILLERS = [("How long has this been going on?", "About three days."),
           ("Are you taking any medication?", "Only some vitamins."),
           ("How old are you?", "I am thirty five."),
           ("Did anything change in your routine?", "I started a new job last week.")]
CLOSINGS = [("You should rest and drink plenty of water.", "Thank you, doctor."),
            ("I will prescribe something for you.", "Thanks a lot."),
            ("Please come back if it gets worse.", "I will, thank you.")]


@dataclass
class GeneratorConfig:
    num_dialogues: int = 100
    catalog_size: int = 20
    seed: int = 0
    cross_utterance_rate: float = 0.5
    status_prior: tuple[float, float, float] = (0.5, 0.3, 0.2)
    num_diseases: int = 10
    cluster_size: int = 4
    symptoms_per_dialogue: tuple[int, int] = (2, 4)
    alias_rate: float = 0.5
    combine_rate: float = 0.1
    filler_rate: float = 0.3

    def validate(self) -> None:
        if self.catalog_size < 3:
            raise ValueError(f"catalog_size must be >= 3, got {self.catalog_size}")
        if self.num_dialogues < 1:
            raise ValueError(f"num_dialogues must be >= 1, got {self.num_dialogues}")
        if not 1 <= self.cluster_size <= 6:
            raise ValueError(f"cluster_size must be in [1, 6], got {self.cluster_size}")
        if self.catalog_size > self.cluster_size * len(SYMPTOM_CLUSTERS):
            raise ValueError(f"catalog_size {self.catalog_size} exceeds the symptom inventory "
                             f"({self.cluster_size * len(SYMPTOM_CLUSTERS)} at cluster_size={self.cluster_size})")
        if not 0.0 <= self.cross_utterance_rate <= 1.0:
            raise ValueError(f"cross_utterance_rate must be in [0, 1], got {self.cross_utterance_rate}")
        if len(self.status_prior) != 3 or min(self.status_prior) < 0 or abs(sum(self.status_prior) - 1) > 1e-9:
            raise ValueError(f"status_prior must be 3 nonnegative weights summing to 1, got {self.status_prior}")
        lo, hi = self.symptoms_per_dialogue
        if not 1 <= lo <= hi:
            raise ValueError(f"symptoms_per_dialogue must satisfy 1 <= lo <= hi, got {self.symptoms_per_dialogue}")
        if self.num_diseases < 1:
            raise ValueError(f"num_diseases must be >= 1, got {self.num_diseases}")


def catalog_clusters(cfg: GeneratorConfig) -> dict[str, list[str]]:
    """Clusters in use for ``cfg`` with their canonical members, in catalog order."""
    out: dict[str, list[str]] = {}
    left = cfg.catalog_size
    for name, members in SYMPTOM_CLUSTERS.items():
        if left <= 0:
            break
        take = min(cfg.cluster_size, left)
        out[name] = [c for c, _ in members[:take]]
        left -= take
    return out


def synthetic_catalog(cfg: GeneratorConfig) -> SymptomCatalog:
    cfg.validate()
    lookup = {c: a for members in SYMPTOM_CLUSTERS.values() for c, a in members}
    entries = [c for members in catalog_clusters(cfg).values() for c in members]
    return SymptomCatalog(entries, {alias: c for c in entries for alias in lookup[c]})


def synthetic_knowledge(catalog: SymptomCatalog) -> dict[str, str]:
    """Offline stand-in for LLM-written symptom descriptions."""
    cluster_of = {c: name for name, members in SYMPTOM_CLUSTERS.items() for c, _ in members}
    out = {}
    for c in catalog.entries:
        aliases = catalog.aliases_of(c)
        also = f" Patients may describe it as {' or '.join(aliases)}." if aliases else ""
        blurb = CLUSTER_BLURBS.get(cluster_of.get(c, ""), "")
        out[c] = f"{c.capitalize()} is a {cluster_of.get(c, 'clinical')} symptom.{also} {blurb}".strip()
    return out


def _disease_table(cfg: GeneratorConfig) -> list[tuple[str, list[str]]]:
    clusters = list(catalog_clusters(cfg).items())
    table = []
    for k in range(cfg.num_diseases):
        name, members = clusters[k % len(clusters)]
        table.append((f"{name}-disorder-{k // len(clusters) + 1}", members))
    return table


class _Builder:
    def __init__(self):
        self.utts: list[Utterance] = []
        self.mentions: list[SymptomMention] = []

    def say(self, speaker: str, text: str, marks=()):
        """Append an utterance; ``marks`` are (surface, canonical, status) to locate in ``text``."""
        idx = len(self.utts)
        self.utts.append(Utterance(Speaker(speaker), text, idx))
        cursor = 0
        for surface, canonical, status in marks:
            start = text.index(surface, cursor)
            end = start + len(surface)
            self.mentions.append(SymptomMention(idx, start, end, surface, canonical, status))
            cursor = end


def generate_synthetic_corpus(cfg: GeneratorConfig) -> list[Dialogue]:
    """Generate ``cfg.num_dialogues`` annotated dialogues, deterministic under ``cfg.seed``."""
    cfg.validate()
    rng = random.Random(cfg.seed)
    catalog = synthetic_catalog(cfg)
    diseases = _disease_table(cfg)
    width = len(str(cfg.num_dialogues))
    plans = []
    for _ in range(cfg.num_dialogues):
        disease, pool = diseases[rng.randrange(len(diseases))]
        lo, hi = cfg.symptoms_per_dialogue
        k = min(rng.randint(lo, hi), len(pool))
        plans.append((disease, rng.sample(pool, k)))
    # statuses: an exact-quota multiset in random order, so label frequencies track the prior
    total = sum(len(s) for _, s in plans)
    quota = _split_quota(total, cfg.status_prior)
    pool_status = [st for st, q in zip(STATUSES, quota) for _ in range(q)]
    rng.shuffle(pool_status)
    out = []
    for n, (disease, symptoms) in enumerate(plans):
        statuses = [pool_status.pop() for _ in symptoms]

        def surface(c):
            aliases = catalog.aliases_of(c)
            return rng.choice(aliases) if aliases and rng.random() < cfg.alias_rate else c

        b = _Builder()
        _, greet = rng.choice(GREETINGS)
        b.say("Patient", greet)
        b.say("Doctor", rng.choice(GREETING_REPLIES))
        queue = list(zip(symptoms, statuses))
        while queue:
            sym, st = queue.pop(0)
            form = surface(sym)
            if rng.random() < cfg.cross_utterance_rate:
                b.say("Doctor", rng.choice(QUESTION_TEMPLATES).format(form), [(form, sym, st)])
                b.say("Patient", rng.choice(ANSWER_TEMPLATES[st]))
            else:
                b.say("Doctor", rng.choice(OPEN_PROMPTS))
                text = rng.choice(STATEMENT_TEMPLATES[st]).format(form)
                marks = [(form, sym, st)]
                if queue and rng.random() < cfg.combine_rate:
                    sym2, st2 = queue.pop(0)
                    form2 = surface(sym2)
                    text = text[:-1] + ", " + rng.choice(CONJ_STATUS[st2]).format(form2) + "."
                    marks.append((form2, sym2, st2))
                b.say("Patient", text, marks)
            if queue and rng.random() < cfg.filler_rate:
                q, a = rng.choice(FILLERS)
                b.say("Doctor", q)
                b.say("Patient", a)
        q, a = rng.choice(CLOSINGS)
        b.say("Doctor", q)
        b.say("Patient", a)
        out.append(Dialogue(f"syn-{n:0{width}d}", disease, tuple(b.utts), tuple(b.mentions)))
    return out


def _split_quota(total: int, prior) -> list[int]:
    raw = [p * total for p in prior]
    counts = [int(x) for x in raw]
    for i in sorted(range(3), key=lambda i: (counts[i] - raw[i], i))[: total - sum(counts)]:
        counts[i] += 1
    return counts


def perturb_surface(text: str, rng: random.Random) -> str:
    """Noisy variant of a surface form: case change, character drop/swap/duplication or plural."""
    op = rng.randrange(5)
    if op == 0:
        return text.upper() if rng.random() < 0.5 else text.title()
    if len(text) < 4:
        return text + "s"
    i = rng.randrange(1, len(text) - 1)
    if op == 1:
        return text[:i] + text[i + 1:]
    if op == 2:
        return text[:i] + text[i + 1] + text[i] + text[i + 2:]
    if op == 3:
        return text[:i] + text[i] + text[i:]
    return text + "s"
