"""Evaluation quantities: encoder correlations, class probabilities,
BPI/FPI/MPI selection scores, LMS_dec, stereotype score and SEAT."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Gradiend, encode
from .corpus import FEMALE, MALE, ClassSpec, NameRecord, StereoProbe, TARGET
from .lm import FULL, PREFIX, ParamStore, Vocab, final_hidden_mean, masked_accuracy, perplexity, \
    predict_distributions
from .stats import MetricReport, UndefinedCorrelation, bootstrap, pearson

__all__ = ["pearson", "bootstrap", "MetricReport", "UndefinedCorrelation", "EvalSet", "cor_t", "cor_enc",
           "balanced_indices", "ClassTargets", "gender_targets", "attribute_targets", "ProbeResult",
           "class_probability", "probe_probabilities", "selection_scores", "lms_dec", "SSResult",
           "ss_from_scores", "ss_option_scores", "ss_score", "seat_scores", "effect_size", "seat_effect_size", "seat_from_model", "UndefinedEffectSize"]

# provenance tags of encoder evaluation samples
CLASS_A_TEST = "class-A test"
CLASS_B_TEST = "class-B test"
NEUTRAL_MASKED = "neutral-masked"
INDEPENDENT_NEUTRAL = "independent-neutral"
OTHER_CLASS = "other-class"


@dataclass
class EvalSet:
    """Factual gradients with an expected label in {-1, 0, +1} and a provenance tag each."""
    factual: np.ndarray
    labels: np.ndarray
    tags: list[str]
    text_ids: list[str]

    def __post_init__(self):
        self.factual = np.atleast_2d(np.asarray(self.factual, dtype=np.float32))
        self.labels = np.asarray(self.labels, dtype=np.float64)
        m = len(self.factual)
        if not (len(self.labels) == len(self.tags) == len(self.text_ids) == m):
            raise ValueError("factual, labels, tags and text_ids must have one entry per sample")
        if not set(np.unique(self.labels).tolist()) <= {-1.0, 0.0, 1.0}:
            raise ValueError("expected labels must be -1, 0 or +1")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, rows: Sequence[int]) -> "EvalSet":
        rows = list(rows)
        return EvalSet(self.factual[rows], self.labels[rows], [self.tags[i] for i in rows],
                       [self.text_ids[i] for i in rows])


def cor_t(gradiend: Gradiend, factual: np.ndarray, labels: Sequence[str]) -> float:
    """Correlation of encoded values with +1 (first class of the pair) / -1 (second class)."""
    lab = np.asarray(labels)
    a, b = gradiend.class_pair
    if not ((lab == a).any() and (lab == b).any()):
        raise ValueError("cor_t needs samples of both classes")
    return pearson(encode(np.atleast_2d(factual), gradiend), np.where(lab == a, 1.0, -1.0))


def balanced_indices(tags: Sequence[str], seed: int = 0) -> list[int]:
    """Seeded subsample of every tag group down to the smallest group's size."""
    groups: dict[str, list[int]] = {}
    for i, t in enumerate(tags):
        groups.setdefault(t, []).append(i)
    if not groups:
        raise ValueError("no samples")
    k = min(len(v) for v in groups.values())
    rng = np.random.default_rng(seed)
    keep = []
    for t in sorted(groups):
        keep += sorted(rng.choice(groups[t], size=k, replace=False).tolist())
    return sorted(keep)


def cor_enc(gradiend: Gradiend, evalset: EvalSet, seed: int = 0) -> tuple[float, list[int]]:
    """Correlation over all provenance groups, balanced by downsampling.

    Returns the correlation and the sample rows that were used.
    """
    if not (np.abs(evalset.labels) == 1).any() or not (evalset.labels == 0).any():
        raise ValueError("cor_enc needs at least one +-1 labelled and one 0 labelled group")
    rows = balanced_indices(evalset.tags, seed)
    h = encode(evalset.factual[rows], gradiend)
    return pearson(h, evalset.labels[rows]), rows


# ---------------------------------------------------------------- class probabilities

@dataclass(frozen=True)
class ClassTargets:
    """Per-token weights that turn a predicted distribution into P(A) and P(B)."""
    classes: tuple[str, str]
    weight_a: np.ndarray
    weight_b: np.ndarray

    def __post_init__(self):
        if not self.weight_a.any() or not self.weight_b.any():
            raise ValueError("empty target token set")


def gender_targets(vocab: Vocab, names: Sequence[NameRecord]) -> ClassTargets:
    """Name tokens weighted by P(F|N) and P(M|N)."""
    wa = np.zeros(len(vocab))
    wb = np.zeros(len(vocab))
    for r in names:
        wa[vocab.id(r.name)] += r.p_female
        wb[vocab.id(r.name)] += r.p_male
    return ClassTargets((FEMALE, MALE), wa, wb)


def attribute_targets(vocab: Vocab, a: ClassSpec, b: ClassSpec) -> ClassTargets:
    """Indicator weights over each class's attribute tokens."""
    wa = np.zeros(len(vocab))
    wb = np.zeros(len(vocab))
    for t in a.attributes:
        wa[vocab.id(t)] = 1.0
    for t in b.attributes:
        wb[vocab.id(t)] = 1.0
    if (wa * wb).any():
        raise ValueError("class attribute sets overlap")
    return ClassTargets((a.class_id, b.class_id), wa, wb)


@dataclass(frozen=True)
class ProbeResult:
    """Per-text class probabilities."""
    p_a: np.ndarray
    p_b: np.ndarray

    @property
    def p_union(self) -> np.ndarray:
        return self.p_a + self.p_b

    def __post_init__(self):
        for p in (self.p_a, self.p_b, self.p_a + self.p_b):
            if np.any(p < -1e-9) or np.any(p > 1 + 1e-6):
                raise ValueError("class probabilities out of [0, 1]")


def class_probability(dists: np.ndarray, targets: ClassTargets) -> ProbeResult:
    """P(A), P(B) per row of a (m, V) matrix of predicted distributions."""
    d = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    return ProbeResult(d @ targets.weight_a, d @ targets.weight_b)


def probe_probabilities(model: ParamStore, items: Sequence[tuple[Sequence[int], int]],
                        targets: ClassTargets) -> ProbeResult:
    """Class probabilities at the single prediction slot of each probe item."""
    if not items:
        raise ValueError("no probe items")
    return class_probability(predict_distributions(model, items), targets)


def selection_scores(result: ProbeResult, lms: float) -> tuple[float, float, float]:
    """(BPI, FPI, MPI).  FPI favours class A, MPI class B."""
    if len(result.p_a) == 0:
        raise ValueError("selection scores need at least one text")
    if not 0.0 <= lms <= 1.0:
        raise ValueError(f"lms must lie in [0, 1], got {lms}")
    pa, pb = np.asarray(result.p_a, dtype=np.float64), np.asarray(result.p_b, dtype=np.float64)
    m = len(pa)
    bpi = lms / m * float(np.sum((1.0 - np.abs(pa - pb)) * (pa + pb)))
    fpi = lms / m * float(np.sum((1.0 - pb) * pa))
    mpi = lms / m * float(np.sum((1.0 - pa) * pb))
    return bpi, fpi, mpi


def lms_dec(model: ParamStore, neutral: Sequence[Sequence[int]], mode: str | None = None,
            mask_rate: float = 0.15, seed: int = 0) -> float:
    """Masked accuracy (full-context) or 1/(1+perplexity) (prefix) on neutral text."""
    mode = mode or model.config.mode
    if mode != model.config.mode:
        raise ValueError(f"requested {mode} LMS for a {model.config.mode} model")
    if not neutral:
        raise ValueError("empty neutral corpus")
    if mode == FULL:
        return masked_accuracy(model, neutral, mask_rate, seed)
    if mode == PREFIX:
        return 1.0 / (1.0 + perplexity(model, neutral))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- stereotype score

@dataclass(frozen=True)
class SSResult:
    ss: float
    lms_ss: float
    n_probes: int
    n_meaningful: int
    ties: int


def ss_from_scores(scores: np.ndarray) -> SSResult:
    """SS and LMS_ss from (m, 3) scores: stereotypical, anti-stereotypical, meaningless.

    A probe counts as meaningful when the better of the two meaningful options
    strictly beats the meaningless one.  A stereotypical/anti-stereotypical tie
    is counted against the stereotype.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 3 or len(s) == 0:
        raise ValueError("scores must have shape (m, 3) with m >= 1")
    meaningful = np.maximum(s[:, 0], s[:, 1]) > s[:, 2]
    n_mean = int(meaningful.sum())
    st, an = s[meaningful, 0], s[meaningful, 1]
    ss = float((st > an).mean()) if n_mean else float("nan")
    return SSResult(ss, n_mean / len(s), len(s), n_mean, int((st == an).sum()))


def ss_option_scores(model: ParamStore, vocab: Vocab, probes: Sequence[StereoProbe]) -> np.ndarray:
    """(m, 3) probabilities of the stereotypical, anti-stereotypical and meaningless option at the slot."""
    if not probes:
        raise ValueError("no stereotype probes")
    items, opts = [], []
    for p in probes:
        if not (p.stereotypical and p.anti_stereotypical and p.meaningless):
            raise ValueError("probe lacks an option class")
        slot = list(p.tokens).index(TARGET)
        toks = [Vocab.MASK if t == TARGET else t for t in p.tokens]
        items.append((vocab.encode(toks), slot))
        opts.append([vocab.id(p.stereotypical), vocab.id(p.anti_stereotypical), vocab.id(p.meaningless)])
    return np.take_along_axis(predict_distributions(model, items), np.asarray(opts), axis=1)


def ss_score(model: ParamStore, vocab: Vocab, probes: Sequence[StereoProbe]) -> SSResult:
    return ss_from_scores(ss_option_scores(model, vocab, probes))


# ---------------------------------------------------------------- SEAT

class UndefinedEffectSize(ValueError):
    pass


def _unit(e) -> np.ndarray:
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    n = np.linalg.norm(e, axis=1, keepdims=True)
    if (n == 0).any():
        raise ValueError("zero-norm embedding")
    return e / n


def seat_scores(x, y, a, b) -> tuple[np.ndarray, np.ndarray]:
    """Association s(w) = mean cos(w, A) - mean cos(w, B) for every w in X and in Y."""
    sets = [x, y, a, b]
    if any(np.size(s) == 0 for s in sets):
        raise ValueError("all embedding sets must be non-empty")
    X, Y, A, B = (_unit(s) for s in sets)
    if len({m.shape[1] for m in (X, Y, A, B)}) != 1:
        raise ValueError("embeddings must share one dimension")

    def assoc(W):
        return (W @ A.T).mean(axis=1) - (W @ B.T).mean(axis=1)

    return assoc(X), assoc(Y)


def effect_size(sx: np.ndarray, sy: np.ndarray) -> float:
    both = np.concatenate([sx, sy])
    sd = both.std(ddof=1) if len(both) > 1 else 0.0
    if len(sx) == 0 or len(sy) == 0 or sd == 0:
        raise UndefinedEffectSize("association scores have zero spread")
    return float((np.mean(sx) - np.mean(sy)) / sd)


def seat_effect_size(x, y, a, b) -> float:
    """WEAT effect size of target sets X, Y against attribute sets A, B (cosine associations)."""
    return effect_size(*seat_scores(x, y, a, b))


def seat_from_model(model: ParamStore, vocab: Vocab, x: Sequence[Sequence[str]], y: Sequence[Sequence[str]],
                    a: Sequence[Sequence[str]], b: Sequence[Sequence[str]]) -> float:
    """SEAT with sentence embeddings = mean final hidden state of each token sequence."""
    emb = [final_hidden_mean(model, [vocab.encode(s) for s in group]) for group in (x, y, a, b)]
    return seat_effect_size(*emb)


def report(name: str, values, seed: int = 0, resamples: int = 1000) -> MetricReport:
    return bootstrap(values, resamples=resamples, seed=seed, name=name)


def correlation_report(name: str, h: np.ndarray, labels: np.ndarray, seed: int = 0,
                       resamples: int = 1000) -> MetricReport:
    """Bootstrapped Pearson correlation; degenerate resamples score 0."""
    data = np.column_stack([h, labels])

    def stat(d):
        try:
            return pearson(d[:, 0], d[:, 1])
        except UndefinedCorrelation:
            return 0.0

    return bootstrap(data, statistic=stat, resamples=resamples, seed=seed, name=name)

