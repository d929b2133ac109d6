"""Synthetic datasets: name tables, gendered templates, class-pair data, neutral text, probes.

Everything is produced from a small hand-written grammar.  Neutral
sentences follow ``the ADJ NOUN VERB the ADJ NOUN`` where every adjective is
paired with one noun and every verb with two object nouns, so masked tokens
are recoverable from context.  Gendered templates embed one ``[NAME]`` slot
and one later ``[TARGET]`` slot whose pronoun is fixed by the name's gender.
All generators are pure functions of their arguments and ``seed``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lm import ParamStore, Vocab, predict_distributions

log = logging.getLogger(__name__)

NAME = "[NAME]"
TARGET = "[TARGET]"
FEMALE, MALE = "F", "M"
PRONOUNS = {FEMALE: "she", MALE: "he"}
MIN_TEMPLATE_TOKENS = 6

NOUNS = [
    "apple", "bridge", "candle", "garden", "river", "window", "basket", "letter", "mirror", "ladder",
    "kettle", "pillow", "wagon", "button", "bottle", "carpet", "engine", "feather", "hammer", "island",
    "jacket", "lantern", "meadow", "needle", "orchard", "pencil", "quilt", "ribbon", "saddle", "tunnel",
    "violin", "wallet", "anchor", "barrel", "cactus", "desk", "forest", "harbor", "helmet", "map",
]
ADJECTIVES = [
    "red", "old", "tall", "quiet", "bright", "narrow", "heavy", "small", "round", "cold",
    "green", "broken", "shiny", "dusty", "soft", "wooden", "sharp", "wide", "empty", "warm",
    "blue", "gentle", "golden", "hidden", "rusty", "smooth", "thin", "silver", "dark", "clean",
    "tiny", "long", "wet", "bent", "loud", "plain", "flat", "rough", "pale", "steep",
]
VERBS = [
    "moved", "cleaned", "painted", "carried", "fixed", "opened", "watched", "lifted", "found", "pushed",
    "washed", "built", "dropped", "folded", "filled", "checked", "pulled", "sold", "drew", "hid",
]
FUNCTION_WORDS = ["the", "and", "then", "while", "so", "my", "friend", "near", "of"]
STEREO_VERBS = ["likes", "loves", "wants"]
CONNECTORS = ["and", "while", "so"]


@dataclass(frozen=True)
class NameRecord:
    name: str
    p_female: float

    @property
    def p_male(self) -> float:
        return 1.0 - self.p_female

    def p(self, cls: str) -> float:
        return self.p_female if cls == FEMALE else self.p_male

    @property
    def is_exact(self) -> bool:
        return self.p_female in (0.0, 1.0)

    @property
    def gender(self) -> str | None:
        if not self.is_exact:
            return None
        return FEMALE if self.p_female == 1.0 else MALE


@dataclass(frozen=True)
class ClassSpec:
    """One class of a non-gender feature and its attribute tokens.

    Attribute lists of the classes of one feature are aligned by index.
    """
    class_id: str
    attributes: tuple[str, ...]


@dataclass(frozen=True)
class Template:
    """Token sequence with ``[NAME]``/``[TARGET]`` markers.

    ``orthogonal_targets`` maps every non-factual class to its target tokens;
    uninstantiated gender templates have no factual class and list all classes.
    """
    tokens: tuple[str, ...]
    target_slot: int
    name_slot: int | None = None
    factual_class: str | None = None
    factual_target: str | None = None
    orthogonal_targets: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.tokens[self.target_slot] != TARGET:
            raise ValueError("target_slot must point at the [TARGET] marker")
        if self.tokens.count(TARGET) != 1:
            raise ValueError("a template needs exactly one [TARGET] slot")

    def key(self) -> tuple:
        return (self.tokens, self.target_slot, self.name_slot, self.factual_class, self.factual_target,
                tuple(sorted((k, tuple(v)) for k, v in self.orthogonal_targets.items())))

    def instantiate(self, name: str, cls: str, targets: dict[str, str] = PRONOUNS) -> "Template":
        """Fill the name slot with ``name`` of class ``cls``; the target follows the class."""
        if self.name_slot is None or self.tokens[self.name_slot] != NAME:
            raise ValueError("template has no open [NAME] slot")
        toks = list(self.tokens)
        toks[self.name_slot] = name
        return Template(tuple(toks), self.target_slot, self.name_slot, cls, targets[cls],
                        {c: [t] for c, t in targets.items() if c != cls})

    def filled(self, target: str | None = None) -> list[str]:
        """Tokens with the target slot set to ``target`` (default: the factual target)."""
        toks = list(self.tokens)
        toks[self.target_slot] = target or self.factual_target
        return toks

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "name_slot": self.name_slot, "target_slot": self.target_slot,
                "factual_class": self.factual_class, "factual_target": self.factual_target,
                "orthogonal_targets": {k: list(v) for k, v in sorted(self.orthogonal_targets.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> "Template":
        return cls(tuple(obj["tokens"]), obj["target_slot"], obj.get("name_slot"), obj.get("factual_class"),
                   obj.get("factual_target"), {k: list(v) for k, v in obj.get("orthogonal_targets", {}).items()})


@dataclass(frozen=True)
class Probe:
    """Stereotype probe: a context with one ``[NAME]`` slot leaning towards ``leaning``."""
    tokens: tuple[str, ...]
    name_slot: int
    leaning: str

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "name_slot": self.name_slot, "leaning": self.leaning}

    @classmethod
    def from_json(cls, obj: dict) -> "Probe":
        return cls(tuple(obj["tokens"]), obj["name_slot"], obj["leaning"])


@dataclass(frozen=True)
class StereoProbe:
    """Intrasentence probe with stereotypical / anti-stereotypical / meaningless options."""
    tokens: tuple[str, ...]   # contains one [TARGET] marker
    stereotypical: str
    anti_stereotypical: str
    meaningless: str

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "stereotypical": self.stereotypical,
                "anti_stereotypical": self.anti_stereotypical, "meaningless": self.meaningless}

    @classmethod
    def from_json(cls, obj: dict) -> "StereoProbe":
        return cls(tuple(obj["tokens"]), obj["stereotypical"], obj["anti_stereotypical"], obj["meaningless"])


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list


# ---------------------------------------------------------------- lexicon

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "br", "kl", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea"]
_CODAS = ["", "", "n", "l", "r", "s"]


def _syllable_name(rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 4))
    parts = [str(rng.choice(_ONSETS)) + str(rng.choice(_VOWELS)) for _ in range(n)]
    return "".join(parts) + str(rng.choice(_CODAS))


def gen_name_table(count_exact: int, count_ambiguous: int, seed: int,
                   reserved: Iterable[str] = (), budget: int = 120) -> list[NameRecord]:
    """Exact names (half female, half male) followed by ambiguous names.

    Ambiguous probabilities come in mirrored pairs ``p, 1 - p`` so the table
    stays gender-balanced.
    """
    if count_exact < 1 or count_ambiguous < 1:
        raise ValueError("name counts must be >= 1")
    if count_exact + count_ambiguous > budget:
        raise ValueError(f"{count_exact + count_ambiguous} names exceed the vocabulary budget of {budget}")
    rng = np.random.default_rng(seed)
    taken = set(reserved)
    names: list[str] = []
    while len(names) < count_exact + count_ambiguous:
        cand = _syllable_name(rng)
        if cand not in taken:
            taken.add(cand)
            names.append(cand)
    n_female = (count_exact + 1) // 2
    records = [NameRecord(n, 1.0 if i < n_female else 0.0) for i, n in enumerate(names[:count_exact])]
    probs = []
    for _ in range(count_ambiguous // 2):
        p = round(float(rng.uniform(0.1, 0.9)), 3)
        probs += [p, round(1.0 - p, 3)]
    if count_ambiguous % 2:
        probs.append(0.5)
    records += [NameRecord(n, p) for n, p in zip(names[count_exact:], probs)]
    return records


@dataclass
class Lexicon:
    names: list[NameRecord]
    classes: list[ClassSpec]
    traits: dict[str, list[str]]
    vocab_size: int = 200

    @property
    def pronouns(self) -> dict[str, str]:
        return dict(PRONOUNS)

    def exact_names(self, cls: str | None = None) -> list[NameRecord]:
        return [r for r in self.names if r.is_exact and (cls is None or r.gender == cls)]

    def class_tokens(self) -> set[str]:
        toks = {r.name for r in self.names} | set(PRONOUNS.values())
        toks |= {a for c in self.classes for a in c.attributes}
        toks |= {t for ts in self.traits.values() for t in ts}
        return toks

    def content_tokens(self) -> list[str]:
        toks = FUNCTION_WORDS + STEREO_VERBS + NOUNS + ADJECTIVES + VERBS
        toks = toks + [t for c in sorted(self.traits) for t in self.traits[c]]
        toks = toks + [a for c in self.classes for a in c.attributes]
        return toks + [PRONOUNS[FEMALE], PRONOUNS[MALE]] + [r.name for r in self.names]

    def vocab(self) -> Vocab:
        toks = self.content_tokens()
        spare = self.vocab_size - 2 - len(toks)
        if spare < 0:
            raise ValueError(f"lexicon needs {len(toks) + 2} ids but vocab_size is {self.vocab_size}")
        return Vocab(toks + [f"spare{i:03d}" for i in range(spare)])

    def to_json(self) -> dict:
        return {"names": [[r.name, r.p_female] for r in self.names],
                "classes": [[c.class_id, list(c.attributes)] for c in self.classes],
                "traits": self.traits, "vocab_size": self.vocab_size}

    @classmethod
    def from_json(cls, obj: dict) -> "Lexicon":
        return cls([NameRecord(n, p) for n, p in obj["names"]],
                   [ClassSpec(c, tuple(a)) for c, a in obj["classes"]], obj["traits"], obj["vocab_size"])


ATTRIBUTE_ROLES = ("hall", "feast", "elder", "song")
CLASS_IDS = ("ava", "bel", "cor")


def make_lexicon(seed: int = 0, n_exact: int = 40, n_ambiguous: int = 8, n_traits: int = 8,
                 vocab_size: int = 200) -> Lexicon:
    classes = [ClassSpec(c, tuple(f"{c}_{r}" for r in ATTRIBUTE_ROLES)) for c in CLASS_IDS]
    traits = {g: [f"trait_{g.lower()}{i}" for i in range(n_traits)] for g in (FEMALE, MALE)}
    reserved = set(FUNCTION_WORDS + STEREO_VERBS + NOUNS + ADJECTIVES + VERBS) | set(PRONOUNS.values())
    names = gen_name_table(n_exact, n_ambiguous, seed, reserved=reserved)
    lex = Lexicon(names, classes, traits, vocab_size)
    lex.vocab()  # validates the budget
    return lex


# ---------------------------------------------------------------- grammar

def _noun_phrase(rng, i: int | None = None) -> list[str]:
    i = int(rng.integers(len(NOUNS))) if i is None else i
    return ["the", ADJECTIVES[i], NOUNS[i]]


def _predicate(rng) -> list[str]:
    v = int(rng.integers(len(VERBS)))
    obj = 2 * v + int(rng.integers(2))
    return [VERBS[v]] + _noun_phrase(rng, obj)


def _neutral_sentence(rng) -> list[str]:
    toks = _noun_phrase(rng) + _predicate(rng)
    r = rng.random()
    if r < 0.35:
        toks += ["and", "then"] + _predicate(rng)
    elif r < 0.7:
        toks += ["while"] + _noun_phrase(rng) + _predicate(rng)
    return toks


def _gender_template_tokens(rng) -> list[str]:
    conn = [str(rng.choice(CONNECTORS))] + (["then"] if rng.random() < 0.5 else [])
    if rng.random() < 0.6:
        return [NAME] + _predicate(rng) + conn + [TARGET] + _predicate(rng)
    return _noun_phrase(rng) + [VERBS[int(rng.integers(len(VERBS)))], NAME] + conn + [TARGET] + _predicate(rng)


def gen_templates(count: int, seed: int, feature: str = "gender") -> list[Template]:
    """Gender templates: one [NAME], then one [TARGET] pronoun slot, neutral tokens elsewhere."""
    if feature != "gender":
        raise ValueError("gen_templates builds gender templates; use gen_pair_dataset for other features")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        toks = _gender_template_tokens(rng)
        assert len(toks) >= MIN_TEMPLATE_TOKENS
        out.append(Template(tuple(toks), toks.index(TARGET), toks.index(NAME), None, None,
                            {c: [t] for c, t in PRONOUNS.items()}))
    return out


def gen_neutral_corpus(count: int, seed: int) -> list[list[str]]:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return [_neutral_sentence(rng) for _ in range(count)]


def _stereo_context(rng, lex: Lexicon, leaning: str, subject: list[str]) -> list[str]:
    trait = str(rng.choice(lex.traits[leaning]))
    toks = subject + [str(rng.choice(STEREO_VERBS)), "the", trait]
    if rng.random() < 0.3:
        toks += ["and", "then"] + _predicate(rng)
    return toks


def gen_probe_set(lex: Lexicon, count: int, seed: int) -> list[Probe]:
    """Stereotype probes with a [NAME] slot; leanings alternate so classes are balanced."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    probes = []
    for i in range(count):
        leaning = FEMALE if i % 2 == 0 else MALE
        toks = _stereo_context(rng, lex, leaning, ["my", "friend", NAME])
        probes.append(Probe(tuple(toks), 2, leaning))
    return probes


def gen_stereo_probes(lex: Lexicon, count: int, seed: int) -> list[StereoProbe]:
    """Intrasentence probes: gendered subject, masked trait slot, three candidate fillers."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        g = FEMALE if i % 2 == 0 else MALE
        other = MALE if g == FEMALE else FEMALE
        if rng.random() < 0.5:
            subject = ["my", "friend", str(rng.choice([r.name for r in lex.exact_names(g)]))]
        else:
            subject = [PRONOUNS[g]]
        toks = subject + [str(rng.choice(STEREO_VERBS)), "the", TARGET]
        out.append(StereoProbe(tuple(toks), str(rng.choice(lex.traits[g])), str(rng.choice(lex.traits[other])),
                               str(rng.choice(VERBS))))
    return out


def gen_pair_texts(classes: Sequence[ClassSpec], count: int, seed: int,
                   weights: Sequence[float] | None = None) -> list[list[str]]:
    """Sentences holding two attribute tokens of one class, so the class is inferable."""
    rng = np.random.default_rng(seed)
    w = np.full(len(classes), 1 / len(classes)) if weights is None else np.asarray(weights) / np.sum(weights)
    out = []
    for _ in range(count):
        spec = classes[int(rng.choice(len(classes), p=w))]
        x, y = rng.choice(len(spec.attributes), size=2, replace=False)
        a, b = spec.attributes[int(x)], spec.attributes[int(y)]
        if rng.random() < 0.5:
            out.append(_noun_phrase(rng) + [VERBS[int(rng.integers(len(VERBS)))], "the", a, "near", "the", b])
        else:
            out.append(["the", a, "of", "the", b] + _predicate(rng))
    return out


def gen_pair_dataset(a: ClassSpec, b: ClassSpec, texts: Sequence[Sequence[str]], seed: int = 0) -> list[Template]:
    """Both directions of a class pair: factual a-token vs aligned b-token, and b vs a.

    The first attribute occurrence of a text becomes the target slot, so the
    result does not depend on the order of ``a`` and ``b``.  ``seed`` only
    shuffles the output.
    """
    if a.class_id == b.class_id:
        raise ValueError("pair dataset needs two distinct classes")
    if len(a.attributes) != len(b.attributes):
        raise ValueError(f"attribute lists of {a.class_id} and {b.class_id} are not aligned")
    out = []
    for fact, orth in ((a, b), (b, a)):
        index = {t: i for i, t in enumerate(fact.attributes)}
        for text in texts:
            slot = next((p for p, t in enumerate(text) if t in index), None)
            if slot is None:
                continue
            toks = list(text)
            factual = toks[slot]
            toks[slot] = TARGET
            out.append(Template(tuple(toks), slot, None, fact.class_id, factual,
                                {orth.class_id: [orth.attributes[index[factual]]]}))
    order = np.random.default_rng(seed).permutation(len(out))
    return [out[i] for i in order]


def sample_gender(rng, p_female: float) -> str:
    return FEMALE if rng.random() < p_female else MALE


def sample_name(rng, lex: Lexicon, gender: str) -> str:
    """Name drawn with weight P(gender | name) over the whole table."""
    w = np.array([r.p(gender) for r in lex.names])
    return lex.names[int(rng.choice(len(w), p=w / w.sum()))].name


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


# name->pronoun agreement is learned late by the toy model, so gender text dominates
DEFAULT_MIX = {"neutral": 0.2, "gender": 0.5, "stereo_name": 0.1, "stereo_pronoun": 0.1, "pair": 0.1}


def gen_lm_corpus(lex: Lexicon, count: int, seed: int, skew: float = 0.7, stereo_shift: float = 0.4,
                  mix: dict | None = None, name_coref: float = 0.5) -> list[list[str]]:
    """Pretraining text for the base model with injected class skew.

    ``skew`` is the share of class-A (female) names/pronouns; stereotyped
    contexts shift that share by ``stereo_shift`` on the logit scale
    towards their leaning.  In gendered sentences the second mention is a
    same-gender name instead of the pronoun with probability ``name_coref``,
    so names and pronouns share contexts as they do in natural text.
    """
    mix = mix or DEFAULT_MIX
    kinds = sorted(mix)
    p = np.array([mix[k] for k in kinds], dtype=float)
    rng = np.random.default_rng(seed)
    base = math.log(skew / (1 - skew))
    out: list[list[str]] = []
    for _ in range(count):
        kind = kinds[int(rng.choice(len(kinds), p=p / p.sum()))]
        if kind == "neutral":
            out.append(_neutral_sentence(rng))
        elif kind == "gender":
            g = sample_gender(rng, skew)
            toks = _gender_template_tokens(rng)
            toks[toks.index(NAME)] = sample_name(rng, lex, g)
            toks[toks.index(TARGET)] = sample_name(rng, lex, g) if rng.random() < name_coref else PRONOUNS[g]
            out.append(toks)
        elif kind in ("stereo_name", "stereo_pronoun"):
            leaning = FEMALE if rng.random() < 0.5 else MALE
            g = sample_gender(rng, _sigmoid(base + (stereo_shift if leaning == FEMALE else -stereo_shift)))
            subject = (["my", "friend", sample_name(rng, lex, g)] if kind == "stereo_name" else [PRONOUNS[g]])
            out.append(_stereo_context(rng, lex, leaning, subject))
        else:
            out += gen_pair_texts(lex.classes, 1, int(rng.integers(2**63)), weights=[0.45, 0.35, 0.2])
    return out


# ---------------------------------------------------------------- filtering & splitting

def judge_filter(model: ParamStore, vocab: Vocab, templates: Sequence[Template],
                 probe_names: Sequence[NameRecord]) -> tuple[list[Template], float]:
    """Keep templates whose pronoun the model gets right (argmax) for every probe name.

    Returns the kept templates and the surviving fraction.
    """
    if not probe_names:
        raise ValueError("judge_filter needs at least one probe name")
    if not templates:
        return [], 0.0
    items, expected = [], []
    for t in templates:
        for r in probe_names:
            inst = t.instantiate(r.name, r.gender)
            ids = vocab.encode(inst.filled(Vocab.MASK))
            items.append((ids, inst.target_slot))
            expected.append(vocab.id(inst.factual_target))
    dist = predict_distributions(model, items)
    ok = (dist.argmax(axis=1) == np.asarray(expected)).reshape(len(templates), len(probe_names)).all(axis=1)
    kept = [t for t, good in zip(templates, ok) if good]
    frac = len(kept) / len(templates)
    log.info("judge filter kept %d/%d templates (%.1f%%)", len(kept), len(templates), 100 * frac)
    return kept, frac


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(dataset: Sequence, fractions: Sequence[float] = (0.875, 0.025, 0.10), seed: int = 0,
          stratify: Sequence | None = None) -> DatasetSplit:
    """Deterministic disjoint train/validation/test partition.

    With ``stratify`` (one label per item) each label is split separately, so
    validation and test keep the class balance of the input.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    groups: dict = {}
    labels = [None] * len(dataset) if stratify is None else list(stratify)
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    parts: list[list[int]] = [[], [], []]
    if stratify is None:
        idx = rng.permutation(len(dataset))
        sizes = _allocate(len(dataset), fractions)
        parts = [list(idx[: sizes[0]]), list(idx[sizes[0]: sizes[0] + sizes[1]]), list(idx[sizes[0] + sizes[1]:])]
    else:
        for lab in sorted(groups, key=str):
            idx = rng.permutation(groups[lab])
            sizes = _allocate(len(idx), fractions)
            parts[0] += list(idx[: sizes[0]])
            parts[1] += list(idx[sizes[0]: sizes[0] + sizes[1]])
            parts[2] += list(idx[sizes[0] + sizes[1]:])
    return DatasetSplit(*[[dataset[i] for i in sorted(p)] for p in parts])


# ---------------------------------------------------------------- JSON lines

def write_jsonl(path, rows: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
