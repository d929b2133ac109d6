"""End-to-end run: data -> base model -> GRADIEND -> encoder eval -> sweep -> selection -> report.

Every stage writes its artifacts under the output directory and records
their SHA-256 in ``manifest.json`` together with a key derived from the
config and the upstream artifacts.  A rerun with the same key reuses the
stage after re-verifying the hashes; a mismatch raises
:class:`~gradiend.io.IntegrityError` naming the artifact.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import corpus as C
from . import io as gio
from . import metrics as M
from .core import TemplateSource, TrainConfig, encode, multi_seed_train, standardize_sign
from .gradients import build_flat_index, factual_gradient
from .lm import FULL, ModelConfig, ParamStore, Vocab, build_model, final_hidden_mean, masked_hits, \
    perplexity, train_lm
from .rewrite import CRITERIA, DEFAULT_FEATURE_FACTORS, DEFAULT_LEARNING_RATES, SweepCell, SweepGrid, \
    rewrite, select, sweep

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-lm", "train-gradiend", "eval-encoder", "sweep", "select", "report")


# ---------------------------------------------------------------- configuration

@dataclass
class CorpusSection:
    feature: str = "gender"          # "gender" or a class pair such as "ava/bel"
    n_exact: int = 40
    n_ambiguous: int = 8
    n_traits: int = 8
    vocab_size: int = 200
    lm_corpus_size: int = 8000
    skew: float = 0.7
    stereo_shift: float = 0.4
    name_coref: float = 0.3
    mix: dict = field(default_factory=lambda: dict(C.DEFAULT_MIX))
    n_templates: int = 1000
    judge_names: int = 10
    gender_split: tuple = (0.875, 0.025, 0.10)
    pair_texts: int = 1200
    pair_split: tuple = (0.70, 0.20, 0.10)
    n_neutral_lms: int = 300
    n_neutral_eval: int = 200
    n_probes: int = 100
    n_stereo_probes: int = 200


@dataclass
class ModelSection:
    embed_dim: int = 32
    max_seq_len: int = 16
    num_blocks: int = 1
    num_heads: int = 2
    ffn_mult: int = 4
    mode: str = FULL
    steps: int = 4000
    lr: float = 3e-3
    batch_size: int = 32
    mask_rate: float = 0.15


@dataclass
class GradiendSection:
    lr: float = 1e-3                 # 1e-5 for large pretrained LMs
    weight_decay: float = 1e-2
    steps: int = 2000
    eval_every: int = 250
    grad_batch: int = 32
    n_seeds: int = 3
    n_val_per_class: int = 50
    n_test_per_class: int = 100
    n_neutral: int = 100


@dataclass
class SweepSection:
    # inferred, not published: they contain every (h, alpha) of the selected-model tables
    feature_factors: tuple = DEFAULT_FEATURE_FACTORS
    learning_rates: tuple = DEFAULT_LEARNING_RATES
    include_base_cell: bool = True


@dataclass
class MetricsSection:
    resamples: int = 1000
    ci_level: float = 0.95
    mask_rate: float = 0.15


@dataclass
class IOSection:
    save_rewritten: bool = True


_SECTIONS = {"corpus": CorpusSection, "model": ModelSection, "gradiend": GradiendSection,
             "sweep": SweepSection, "metrics": MetricsSection, "io": IOSection}


def _build_section(cls, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        kwargs[k] = tuple(v) if isinstance(default, tuple) else v
    return cls(**kwargs)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    gradiend: GradiendSection = field(default_factory=GradiendSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    io: IOSection = field(default_factory=IOSection)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        unknown = sorted(set(obj) - set(_SECTIONS) - {"seed", "out"})
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs: dict[str, Any] = {k: obj[k] for k in ("seed", "out") if k in obj}
        for name, sec in _SECTIONS.items():
            val = obj.get(name, {})
            if not isinstance(val, dict):
                raise ValueError(f"config section {name!r} must be an object")
            kwargs[name] = _build_section(sec, val, name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(gio.read_json(path))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def validate(self) -> None:
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        TrainConfig(lr=self.gradiend.lr, weight_decay=self.gradiend.weight_decay, steps=self.gradiend.steps,
                    eval_every=self.gradiend.eval_every, grad_batch=self.gradiend.grad_batch)
        SweepGrid(tuple(self.sweep.feature_factors), tuple(self.sweep.learning_rates), self.sweep.include_base_cell)
        if self.gradiend.n_seeds < 1:
            raise ValueError("gradiend.n_seeds must be >= 1")
        _feature_pair(self.corpus.feature)


def _feature_pair(feature: str) -> tuple[str, str] | None:
    if feature == "gender":
        return None
    parts = feature.split("/")
    if len(parts) != 2 or parts[0] == parts[1] or not set(parts) <= set(C.CLASS_IDS):
        raise ValueError(f"feature must be 'gender' or two of {C.CLASS_IDS} joined by '/', got {feature!r}")
    return tuple(sorted(parts))


def derive_seed(seed: int, label: str) -> int:
    """Independent 32-bit sub-seed for one named use of the global seed."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{label}".encode()).digest()[:4], "little")


# ---------------------------------------------------------------- stage runner

def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class Run:
    """Stage bookkeeping for one output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        fresh = {"config": self.config.to_dict(), "seed": self.config.seed, "stages": {}, "completed": []}
        if not self.manifest_path.exists():
            return fresh
        old = gio.read_json(self.manifest_path)
        fresh["stages"] = old.get("stages", {})
        return fresh

    def path(self, rel: str) -> Path:
        return self.out / rel

    def save_manifest(self) -> None:
        gio.write_json(self.manifest_path, self.manifest)

    def verify(self, stage: str) -> None:
        for rel, digest in self.manifest["stages"][stage]["artifacts"].items():
            p = self.path(rel)
            if not p.exists():
                raise gio.IntegrityError(f"artifact {rel} of stage {stage} is missing")
            if gio.sha256_file(p) != digest:
                raise gio.IntegrityError(f"artifact {rel} of stage {stage} does not match its recorded hash")

    def stage(self, name: str, key_obj, fn: Callable[[], tuple[list[str], dict]]) -> dict:
        key = _hash_obj([name, key_obj])
        rec = self.manifest["stages"].get(name)
        if rec is not None and rec.get("key") == key:
            self.verify(name)
            log.info("stage %s: cached", name)
        else:
            t0 = time.perf_counter()
            log.info("stage %s: running", name)
            artifacts, info = fn()
            rec = {"key": key, "artifacts": {a: gio.sha256_file(self.path(a)) for a in sorted(artifacts)},
                   "info": info, "seconds": round(time.perf_counter() - t0, 3)}
            self.manifest["stages"][name] = rec
        if name not in self.manifest["completed"]:
            self.manifest["completed"].append(name)
        self.save_manifest()
        return rec

    def digest(self, stage: str) -> dict:
        return self.manifest["stages"][stage]["artifacts"]


# ---------------------------------------------------------------- data helpers

def _lexicon(cfg: RunConfig) -> C.Lexicon:
    c = cfg.corpus
    return C.make_lexicon(derive_seed(cfg.seed, "lexicon"), c.n_exact, c.n_ambiguous, c.n_traits, c.vocab_size)


def _probe_items(vocab: Vocab, probes: list[C.Probe]) -> list[tuple[list[int], int]]:
    return [(vocab.encode([Vocab.MASK if t == C.NAME else t for t in p.tokens]), p.name_slot) for p in probes]


def _template_items(vocab: Vocab, templates: list[C.Template]) -> list[tuple[list[int], int]]:
    return [(vocab.encode(t.filled(Vocab.MASK)), t.target_slot) for t in templates]


def _mask_neutral(tokens: list[str], position: int, name_slot=None) -> C.Template:
    toks = list(tokens)
    orig = toks[position]
    toks[position] = C.TARGET
    return C.Template(tuple(toks), position, name_slot, "neutral", orig, {})


def _read_templates(path) -> list[C.Template]:
    return [C.Template.from_json(o) for o in C.read_jsonl(path)]


# ---------------------------------------------------------------- stages

def _gen_data(run: Run) -> tuple[list[str], dict]:
    cfg, c = run.config, run.config.corpus
    lex = _lexicon(cfg)
    s = lambda label: derive_seed(cfg.seed, label)  # noqa: E731
    gio.write_json(run.path("data/lexicon.json"), lex.to_json())
    lm_corpus = C.gen_lm_corpus(lex, c.lm_corpus_size, s("lm-corpus"), c.skew, c.stereo_shift, c.mix, c.name_coref)
    C.write_jsonl(run.path("data/lm_corpus.jsonl"), ({"tokens": t} for t in lm_corpus))
    pair = _feature_pair(c.feature)
    if pair is None:
        templates = C.gen_templates(c.n_templates, s("templates"))
    else:
        spec = {k.class_id: k for k in lex.classes}
        texts = C.gen_pair_texts([spec[pair[0]], spec[pair[1]]], c.pair_texts, s("pair-texts"))
        templates = C.gen_pair_dataset(spec[pair[0]], spec[pair[1]], texts, s("pair-dataset"))
        other = [k for k in lex.classes if k.class_id not in pair][0]
        other_texts = C.gen_pair_texts([other], max(1, c.pair_texts // 4), s("other-texts"))
        C.write_jsonl(run.path("data/other_class.jsonl"), ({"tokens": t} for t in other_texts))
    C.write_jsonl(run.path("data/templates.jsonl"), (t.to_json() for t in templates))
    C.write_jsonl(run.path("data/neutral_lms.jsonl"),
                  ({"tokens": t} for t in C.gen_neutral_corpus(c.n_neutral_lms, s("neutral-lms"))))
    C.write_jsonl(run.path("data/neutral_eval.jsonl"),
                  ({"tokens": t} for t in C.gen_neutral_corpus(c.n_neutral_eval, s("neutral-eval"))))
    C.write_jsonl(run.path("data/probes.jsonl"), (p.to_json() for p in C.gen_probe_set(lex, c.n_probes, s("probes"))))
    C.write_jsonl(run.path("data/stereo_probes.jsonl"),
                  (p.to_json() for p in C.gen_stereo_probes(lex, c.n_stereo_probes, s("stereo"))))
    arts = ["data/lexicon.json", "data/lm_corpus.jsonl", "data/templates.jsonl", "data/neutral_lms.jsonl",
            "data/neutral_eval.jsonl", "data/probes.jsonl", "data/stereo_probes.jsonl"]
    if pair is not None:
        arts.append("data/other_class.jsonl")
    return arts, {"templates": len(templates), "lm_corpus": len(lm_corpus)}


def _load_lex_vocab(run: Run) -> tuple[C.Lexicon, Vocab]:
    lex = C.Lexicon.from_json(gio.read_json(run.path("data/lexicon.json")))
    return lex, lex.vocab()


def _tokens(path) -> list[list[str]]:
    return [o["tokens"] for o in C.read_jsonl(path)]


def _train_lm(run: Run) -> tuple[list[str], dict]:
    cfg, mc = run.config, run.config.model
    lex, vocab = _load_lex_vocab(run)
    mcfg = ModelConfig(len(vocab), mc.max_seq_len, mc.embed_dim, mc.num_blocks, mc.num_heads, mc.ffn_mult, mc.mode,
                       derive_seed(cfg.seed, "model-init"))
    model = build_model(mcfg)
    corpus = [vocab.encode(t) for t in _tokens(run.path("data/lm_corpus.jsonl"))]
    hist = train_lm(model, corpus, mc.steps, lr=mc.lr, seed=derive_seed(cfg.seed, "lm-train"),
                    batch_size=mc.batch_size, mask_rate=mc.mask_rate,
                    focus_ids=[vocab.id(t) for t in sorted(lex.class_tokens())])
    gio.save_model(run.path("model/base.grd1"), model)
    k = min(100, len(hist))
    return ["model/base.grd1", "model/base.grd1.json"], {
        "loss_first": float(np.mean(hist[:k])), "loss_last": float(np.mean(hist[-k:]))}


def _class_instances(run: Run, model: ParamStore, lex: C.Lexicon, vocab: Vocab):
    """Training/validation/test instances per class, after judge filtering for gender."""
    cfg, c = run.config, run.config.corpus
    templates = _read_templates(run.path("data/templates.jsonl"))
    pair = _feature_pair(c.feature)
    if pair is None:
        exact = lex.exact_names()
        half = max(1, c.judge_names // 2)
        probe_names = lex.exact_names(C.FEMALE)[:half] + lex.exact_names(C.MALE)[:half]
        kept, frac = C.judge_filter(model, vocab, templates, probe_names)
        if len(kept) < 10:
            raise RuntimeError(f"judge filter kept only {len(kept)} templates; the base model is undertrained")
        sp = C.split(kept, c.gender_split, seed=derive_seed(cfg.seed, "split"))
        names = {g: [r.name for r in exact if r.gender == g] for g in (C.FEMALE, C.MALE)}

        def inst(ts):
            return {g: [t.instantiate(n, g) for t in ts for n in names[g]] for g in (C.FEMALE, C.MALE)}

        return (C.FEMALE, C.MALE), inst(sp.train), inst(sp.validation), inst(sp.test), {"judge_fraction": frac}
    labels = [t.factual_class for t in templates]
    sp = C.split(templates, c.pair_split, seed=derive_seed(cfg.seed, "split"), stratify=labels)

    def by_class(ts):
        return {k: [t for t in ts if t.factual_class == k] for k in pair}

    return pair, by_class(sp.train), by_class(sp.validation), by_class(sp.test), {}


def _sample(rng, pool: list, k: int) -> list:
    rows = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    return [pool[i] for i in sorted(rows)]


def _grads(model, vocab, index, instances) -> np.ndarray:
    if not instances:
        return np.zeros((0, index.n), dtype=np.float32)
    return np.stack([factual_gradient(model, vocab, i, index) for i in instances])


def _train_gradiend(run: Run) -> tuple[list[str], dict]:
    cfg, gc = run.config, run.config.gradiend
    lex, vocab = _load_lex_vocab(run)
    model = gio.load_model(run.path("model/base.grd1"))
    index = build_flat_index(model)
    pair, train, val, test, info = _class_instances(run, model, lex, vocab)
    rng = np.random.default_rng(derive_seed(cfg.seed, "val-sample"))
    val_inst = {k: _sample(rng, val[k], gc.n_val_per_class) for k in pair}
    Xv = _grads(model, vocab, index, val_inst[pair[0]] + val_inst[pair[1]])
    yv = [pair[0]] * len(val_inst[pair[0]]) + [pair[1]] * len(val_inst[pair[1]])
    rng = np.random.default_rng(derive_seed(cfg.seed, "test-sample"))
    test_inst = {k: _sample(rng, test[k], gc.n_test_per_class) for k in pair}
    C.write_jsonl(run.path("gradiend/test_instances.jsonl"),
                  ({**t.to_json(), "class": k} for k in pair for t in test_inst[k]))
    source = TemplateSource(model, vocab, train, batch_size=gc.grad_batch, index=index)
    seeds = tuple(derive_seed(cfg.seed, f"gradiend-{i}") for i in range(gc.n_seeds))
    tc = TrainConfig(lr=gc.lr, weight_decay=gc.weight_decay, steps=gc.steps, eval_every=gc.eval_every,
                     grad_batch=gc.grad_batch, seeds=seeds)
    result = multi_seed_train(index.n, lambda s: source, Xv, yv, tc, index=index, class_pair=pair)
    g = standardize_sign(result.best, Xv, yv)
    best = result.states[result.best_seed]
    gio.save_gradiend(run.path("gradiend/gradiend.grd1"), g, {
        "cor_t": best.best_cor, "seed": result.best_seed, "step": best.best_step})
    info.update({"seed_scores": {str(s): v for s, v in result.scores.items()}, "best_seed": result.best_seed,
                 "n": index.n, "val_size": len(yv),
                 "evaluations": {str(s): st.evaluations for s, st in result.states.items()}})
    return ["gradiend/gradiend.grd1", "gradiend/gradiend.grd1.json", "gradiend/test_instances.jsonl"], info


def _eval_encoder(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    lex, vocab = _load_lex_vocab(run)
    model = gio.load_model(run.path("model/base.grd1"))
    g = gio.load_gradiend(run.path("gradiend/gradiend.grd1"))
    a, b = g.class_pair
    rows = C.read_jsonl(run.path("gradiend/test_instances.jsonl"))
    test = [(C.Template.from_json(r), r["class"]) for r in rows]
    rng = np.random.default_rng(derive_seed(cfg.seed, "neutral-mask"))
    samples: list[tuple[str, str, float, C.Template]] = []
    for i, (t, k) in enumerate(test):
        samples.append((f"test-{i}", M.CLASS_A_TEST if k == a else M.CLASS_B_TEST, 1.0 if k == a else -1.0, t))
    cand_tokens = set(lex.class_tokens())
    for i, (t, _) in enumerate(test[: cfg.gradiend.n_neutral // 2] + test[-(cfg.gradiend.n_neutral // 2):]):
        toks = t.filled()
        cand = [p for p, w in enumerate(toks) if p not in (t.name_slot, t.target_slot) and w not in cand_tokens]
        samples.append((f"nmask-{i}", M.NEUTRAL_MASKED, 0.0, _mask_neutral(toks, int(rng.choice(cand)), t.name_slot)))
    neutral = _tokens(run.path("data/neutral_eval.jsonl"))[: cfg.gradiend.n_neutral]
    for i, toks in enumerate(neutral):
        samples.append((f"neutral-{i}", M.INDEPENDENT_NEUTRAL, 0.0, _mask_neutral(toks, int(rng.integers(len(toks))))))
    if run.path("data/other_class.jsonl").exists() and _feature_pair(cfg.corpus.feature) is not None:
        other_attrs = {x for k in lex.classes if k.class_id not in g.class_pair for x in k.attributes}
        for i, toks in enumerate(_tokens(run.path("data/other_class.jsonl"))[: cfg.gradiend.n_neutral]):
            pos = next(p for p, w in enumerate(toks) if w in other_attrs)
            samples.append((f"other-{i}", M.OTHER_CLASS, 0.0, _mask_neutral(toks, pos)))
    X = _grads(model, vocab, g.index, [s[3] for s in samples])
    ev = M.EvalSet(X, [s[2] for s in samples], [s[1] for s in samples], [s[0] for s in samples])
    h = encode(ev.factual, g)
    gio.write_csv(run.path("report/encoded_values.csv"),
                  ({"text_id": s[0], "tag": s[1], "label": s[2], "h": float(v)} for s, v in zip(samples, h)),
                  gio.ENCODED_COLUMNS)
    cls_rows = np.abs(ev.labels) == 1
    cor_t = M.pearson(h[cls_rows], ev.labels[cls_rows])
    cor_enc, used = M.cor_enc(g, ev, seed=derive_seed(cfg.seed, "cor-enc"))
    neutral_rows = ev.labels == 0
    info = {"cor_t": cor_t, "cor_enc": cor_enc, "cor_enc_rows": used,
            "neutral_mean_abs_h": float(np.abs(h[neutral_rows]).mean()),
            "mean_h": {t: float(h[[x == t for x in ev.tags]].mean()) for t in sorted(set(ev.tags))}}
    gio.write_json(run.path("report/encoder.json"), info)
    return ["report/encoded_values.csv", "report/encoder.json"], {k: v for k, v in info.items() if k != "cor_enc_rows"}


def _eval_inputs(run: Run, lex: C.Lexicon, vocab: Vocab, g):
    """Probe items, class targets and the neutral corpus for sweep and report."""
    cfg = run.config
    pair = _feature_pair(cfg.corpus.feature)
    if pair is None:
        probes = [C.Probe.from_json(o) for o in C.read_jsonl(run.path("data/probes.jsonl"))]
        items, targets = _probe_items(vocab, probes), M.gender_targets(vocab, lex.names)
    else:
        rows = C.read_jsonl(run.path("gradiend/test_instances.jsonl"))
        items = _template_items(vocab, [C.Template.from_json(r) for r in rows])
        spec = {k.class_id: k for k in lex.classes}
        targets = M.attribute_targets(vocab, spec[pair[0]], spec[pair[1]])
    neutral = [vocab.encode(t) for t in _tokens(run.path("data/neutral_lms.jsonl"))]
    return items, targets, neutral


def _lms_fn(cfg: RunConfig, neutral):
    def fn(model):
        return M.lms_dec(model, neutral, mask_rate=cfg.metrics.mask_rate, seed=derive_seed(cfg.seed, "lms"))
    return fn


def _grid(cfg: RunConfig) -> SweepGrid:
    return SweepGrid(tuple(cfg.sweep.feature_factors), tuple(cfg.sweep.learning_rates), cfg.sweep.include_base_cell)


def _sweep(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    lex, vocab = _load_lex_vocab(run)
    model = gio.load_model(run.path("model/base.grd1"))
    g = gio.load_gradiend(run.path("gradiend/gradiend.grd1"))
    items, targets, neutral = _eval_inputs(run, lex, vocab, g)
    cells = sweep(model, g, _grid(cfg), items, targets, _lms_fn(cfg, neutral))
    gio.write_csv(run.path("report/sweep.csv"), (c.as_row() for c in cells), gio.SWEEP_COLUMNS)
    return ["report/sweep.csv"], {"cells": len(cells), "failed": sum(not c.ok for c in cells)}


def _cells_from_csv(path) -> list[SweepCell]:
    out = []
    for r in gio.read_csv(path):
        out.append(SweepCell(**{k: (r[k] if k == "status" else float(r[k])) for k in gio.SWEEP_COLUMNS}))
    return out


def _select(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    cells = _cells_from_csv(run.path("report/sweep.csv"))
    model = gio.load_model(run.path("model/base.grd1"))
    g = gio.load_gradiend(run.path("gradiend/gradiend.grd1"))
    chosen, arts = {}, []
    for crit in CRITERIA:
        cell = select(cells, crit)
        entry = cell.as_row()
        if cfg.io.save_rewritten:
            rel = f"model/selected_{crit}.grd1"
            gio.save_model(run.path(rel), rewrite(model, g, cell.h, cell.alpha))
            entry["checkpoint"] = rel
            arts += [rel, rel + ".json"]
        chosen[crit] = entry
    base = next((c for c in cells if c.h == 0 and c.alpha == 0), None)
    if base is not None:
        chosen["base"] = base.as_row()
    gio.write_json(run.path("report/selected.json"), chosen)
    return ["report/selected.json", *arts], {k: {"h": v["h"], "alpha": v["alpha"]} for k, v in chosen.items()}


def _seat_sets(lex: C.Lexicon):
    x = [["my", "friend", r.name] for r in lex.exact_names(C.FEMALE)] + [[C.PRONOUNS[C.FEMALE]]]
    y = [["my", "friend", r.name] for r in lex.exact_names(C.MALE)] + [[C.PRONOUNS[C.MALE]]]
    a = [["the", t] for t in lex.traits[C.FEMALE]]
    b = [["the", t] for t in lex.traits[C.MALE]]
    return x, y, a, b


def _model_reports(label: str, model: ParamStore, run: Run, lex, vocab, items, targets, neutral) -> list:
    cfg, mc = run.config, run.config.metrics
    seed = derive_seed(cfg.seed, "bootstrap")
    boot = lambda name, values, stat=np.mean: M.bootstrap(  # noqa: E731
        values, statistic=stat, resamples=mc.resamples, ci_level=mc.ci_level, seed=seed, name=f"{label}.{name}")
    res = M.probe_probabilities(model, items, targets)
    if model.config.mode == FULL:
        hits = masked_hits(model, neutral, mc.mask_rate, derive_seed(cfg.seed, "lms"))
        lms = float(hits.mean())
        lms_rep = boot("lms_dec", hits)
    else:
        lms = 1.0 / (1.0 + perplexity(model, neutral))
        lms_rep = M.MetricReport(f"{label}.lms_dec", lms, lms, lms, lms, len(neutral))
    pa, pb = res.p_a, res.p_b
    out = [boot("p_a", pa), boot("p_b", pb), lms_rep,
           boot("bpi", lms * (1 - np.abs(pa - pb)) * (pa + pb)),
           boot("fpi", lms * (1 - pb) * pa), boot("mpi", lms * (1 - pa) * pb)]
    if _feature_pair(cfg.corpus.feature) is None:
        probes = [C.StereoProbe.from_json(o) for o in C.read_jsonl(run.path("data/stereo_probes.jsonl"))]
        scores = M.ss_option_scores(model, vocab, probes)
        ss = M.ss_from_scores(scores)
        meaningful = np.maximum(scores[:, 0], scores[:, 1]) > scores[:, 2]
        if meaningful.any():
            out.append(boot("ss", (scores[meaningful, 0] > scores[meaningful, 1]).astype(float)))
        else:
            out.append(M.MetricReport(f"{label}.ss", ss.ss, ss.ss, ss.ss, ss.ss, 0))
        out.append(boot("lms_ss", meaningful.astype(float)))
        emb = [final_hidden_mean(model, [vocab.encode(s) for s in grp]) for grp in _seat_sets(lex)]
        sx, sy = M.seat_scores(*emb)
        rows = np.column_stack([np.r_[sx, sy], np.r_[np.ones(len(sx)), np.zeros(len(sy))]])

        def effect(r):
            try:
                return M.effect_size(r[r[:, 1] == 1, 0], r[r[:, 1] == 0, 0])
            except M.UndefinedEffectSize:
                return 0.0

        out.append(boot("seat", rows, effect))
    return out


def _report(run: Run) -> tuple[list[str], dict]:
    cfg, mc = run.config, run.config.metrics
    lex, vocab = _load_lex_vocab(run)
    g = gio.load_gradiend(run.path("gradiend/gradiend.grd1"))
    items, targets, neutral = _eval_inputs(run, lex, vocab, g)
    seed = derive_seed(cfg.seed, "bootstrap")
    enc = gio.read_json(run.path("report/encoder.json"))
    ev_rows = gio.read_csv(run.path("report/encoded_values.csv"))
    h = np.array([float(r["h"]) for r in ev_rows])
    lab = np.array([float(r["label"]) for r in ev_rows])
    cls_rows = np.abs(lab) == 1
    reports = [
        M.correlation_report("encoder.cor_t", h[cls_rows], lab[cls_rows], seed, mc.resamples),
        M.correlation_report("encoder.cor_enc", h[enc["cor_enc_rows"]], lab[enc["cor_enc_rows"]], seed, mc.resamples),
        M.bootstrap(np.abs(h[lab == 0]), resamples=mc.resamples, ci_level=mc.ci_level, seed=seed,
                    name="encoder.neutral_mean_abs_h"),
    ]
    selected = gio.read_json(run.path("report/selected.json"))
    base = gio.load_model(run.path("model/base.grd1"))
    reports += _model_reports("base", base, run, lex, vocab, items, targets, neutral)
    for crit in CRITERIA:
        entry = selected[crit]
        if "checkpoint" in entry:
            m = gio.load_model(run.path(entry["checkpoint"]))
        else:
            m = rewrite(base, g, entry["h"], entry["alpha"])
        reports += _model_reports(f"selected_{crit}", m, run, lex, vocab, items, targets, neutral)
    gio.write_csv(run.path("report/metrics.csv"), (r.as_row() for r in reports), gio.METRIC_COLUMNS)
    return ["report/metrics.csv"], {"rows": len(reports)}


_STAGE_FNS = {"gen-data": _gen_data, "train-lm": _train_lm, "train-gradiend": _train_gradiend,
              "eval-encoder": _eval_encoder, "sweep": _sweep, "select": _select, "report": _report}
_STAGE_CONFIG = {"gen-data": ("corpus",), "train-lm": ("model",), "train-gradiend": ("corpus", "gradiend"),
                 "eval-encoder": ("gradiend",), "sweep": ("sweep", "metrics"), "select": ("io",),
                 "report": ("metrics",)}


def run_pipeline(config: RunConfig, until: str = "report") -> dict:
    """Run (or resume) all stages up to and including ``until``; returns the manifest."""
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; choose from {STAGES}")
    run = Run(config)
    cfg_dict = config.to_dict()
    upstream: list = []
    t0 = time.perf_counter()
    for name in STAGES[: STAGES.index(until) + 1]:
        key_obj = {"seed": config.seed, "config": {s: cfg_dict[s] for s in _STAGE_CONFIG[name]},
                   "upstream": upstream}
        try:
            rec = run.stage(name, key_obj, lambda fn=_STAGE_FNS[name]: fn(run))
        except Exception as exc:
            run.manifest["failed"] = {"stage": name, "error": f"{type(exc).__name__}: {exc}"}
            run.save_manifest()
            raise
        upstream = upstream + [[name, rec["artifacts"]]]
    run.manifest.pop("failed", None)
    run.manifest["seconds_total"] = round(time.perf_counter() - t0, 3)
    if "train-gradiend" in run.manifest["stages"]:
        info = run.manifest["stages"]["train-gradiend"]["info"]
        run.manifest["gradiend_seed_scores"] = info.get("seed_scores")
    run.save_manifest()
    return run.manifest


def verify_manifest(out_dir) -> None:
    """Re-check every recorded artifact hash of a finished run."""
    manifest = gio.read_json(Path(out_dir) / "manifest.json")
    cfg = RunConfig.from_dict({**manifest["config"], "out": str(out_dir)})
    run = Run(cfg)
    run.manifest = manifest
    for stage in manifest["stages"]:
        run.verify(stage)
