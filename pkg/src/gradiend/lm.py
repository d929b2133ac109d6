"""A tiny pre-LN transformer for masked (full-context) or next-token (prefix) prediction.

The output projection (``head.*``) is untied from the token embeddings so the
prediction head can be excluded cleanly from the parameters GRADIEND sees.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import Adam

log = logging.getLogger(__name__)

FULL = "full-context"
PREFIX = "prefix-only"
HEAD_PREFIX = "head."


class Vocab:
    """Token string <-> id mapping with reserved PAD (0) and MASK (1) ids."""

    PAD = "[PAD]"
    MASK = "[MASK]"

    def __init__(self, tokens: Sequence[str]):
        self.tokens = [self.PAD, self.MASK, *tokens]
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            dupes = sorted({t for t in self.tokens if self.tokens.count(t) > 1})
            raise ValueError(f"duplicate tokens in vocabulary: {dupes[:5]}")

    pad_id = 0
    mask_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} is not in the vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    max_seq_len: int = 16
    embed_dim: int = 32
    num_blocks: int = 1
    num_heads: int = 2
    ffn_mult: int = 4
    mode: str = FULL
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.mode not in (FULL, PREFIX):
            raise ValueError(f"mode must be {FULL!r} or {PREFIX!r}, got {self.mode!r}")
        for field in ("vocab_size", "max_seq_len", "embed_dim", "num_blocks", "num_heads", "ffn_mult"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of the architecture built by :func:`build_model`."""
    d, v, f = cfg.embed_dim, cfg.vocab_size, cfg.embed_dim * cfg.ffn_mult
    per_block = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d)
    return v * d + cfg.max_seq_len * d + cfg.num_blocks * per_block + 2 * d + (d * v + v)


class ParamStore:
    """Named model parameters, iterated in lexicographic order.

    Names starting with ``head.`` belong to the prediction head; everything
    else is body.
    """

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        self._params = {k: np.asarray(params[k], dtype=T.get_dtype()) for k in sorted(params)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._params:
            raise KeyError(name)
        value = np.asarray(value, dtype=T.get_dtype())
        if value.shape != self._params[name].shape:
            raise T.ShapeError(f"{name}: expected {self._params[name].shape}, got {value.shape}")
        self._params[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    @staticmethod
    def is_head(name: str) -> bool:
        return name.startswith(HEAD_PREFIX)

    def body_names(self) -> list[str]:
        return [n for n in self._params if not self.is_head(n)]

    def head_names(self) -> list[str]:
        return [n for n in self._params if self.is_head(n)]

    def n_params(self) -> int:
        return sum(p.size for p in self._params.values())

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._params)

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {k: v.copy() for k, v in self._params.items()})

    def tobytes(self) -> bytes:
        return b"".join(self._params[k].tobytes() for k in self._params)


def build_model(config: ModelConfig) -> ParamStore:
    rng = np.random.default_rng(config.seed)
    d, v, f = config.embed_dim, config.vocab_size, config.embed_dim * config.ffn_mult

    def normal(*shape, std=0.02):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    p: dict[str, np.ndarray] = {
        "embed.tok": normal(v, d, std=0.1),
        "embed.pos": normal(config.max_seq_len, d, std=0.1),
    }
    for b in range(config.num_blocks):
        pre = f"block{b}."
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.w{name}"] = normal(d, d, std=1 / math.sqrt(d))
            p[pre + f"attn.b{name}"] = np.zeros(d, np.float32)
        p[pre + "ffn.w1"] = normal(d, f, std=1 / math.sqrt(d))
        p[pre + "ffn.b1"] = np.zeros(f, np.float32)
        p[pre + "ffn.w2"] = normal(f, d, std=1 / math.sqrt(f))
        p[pre + "ffn.b2"] = np.zeros(d, np.float32)
        for ln in ("ln1", "ln2"):
            p[pre + f"{ln}.gain"] = np.ones(d, np.float32)
            p[pre + f"{ln}.bias"] = np.zeros(d, np.float32)
    p["final_ln.gain"] = np.ones(d, np.float32)
    p["final_ln.bias"] = np.zeros(d, np.float32)
    p["head.weight"] = normal(d, v)
    p["head.bias"] = np.zeros(v, np.float32)
    return ParamStore(config, p)


# ---------------------------------------------------------------- forward pass

def _pack(seqs: Sequence[Sequence[int]], cfg: ModelConfig):
    """Right-pad sequences; return flat ids, flat positions, row width, and key validity."""
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    if width > cfg.max_seq_len:
        raise ValueError(f"sequence of length {width} exceeds max_seq_len={cfg.max_seq_len}")
    if min(len(s) for s in seqs) < 1:
        raise ValueError("empty sequence")
    ids = np.zeros((len(seqs), width), np.int64)
    valid = np.zeros((len(seqs), width), bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise IndexError("token id out of vocabulary range")
    pos = np.tile(np.arange(width), len(seqs))
    return ids.reshape(-1), pos, width, valid


def _attention_mask(valid: np.ndarray, causal: bool) -> np.ndarray:
    """(B, L, L) key mask: same sequence only, no padding keys, optional causality."""
    n_seq, width = valid.shape
    allowed = np.repeat(valid[:, None, :], width, axis=1)
    if causal:
        allowed &= np.tril(np.ones((width, width), bool))[None]
    # padded query rows still need one key; they are never read out
    allowed[~valid] = False
    b, i = np.nonzero(~valid)
    allowed[b, i, i] = True
    return allowed


def _hidden(P: Mapping[str, T.Tensor], seqs, cfg: ModelConfig):
    ids, pos, width, valid = _pack(seqs, cfg)
    x = T.add(T.take_rows(P["embed.tok"], ids), T.take_rows(P["embed.pos"], pos))
    allowed = _attention_mask(valid, causal=cfg.mode == PREFIX)
    n_seq = len(seqs)
    dh = cfg.embed_dim // cfg.num_heads
    for b in range(cfg.num_blocks):
        pre = f"block{b}."
        a = T.layer_norm(x, P[pre + "ln1.gain"], P[pre + "ln1.bias"])
        q = T.add_bias(T.matmul(a, P[pre + "attn.wq"]), P[pre + "attn.bq"])
        k = T.add_bias(T.matmul(a, P[pre + "attn.wk"]), P[pre + "attn.bk"])
        v = T.add_bias(T.matmul(a, P[pre + "attn.wv"]), P[pre + "attn.bv"])
        heads = []
        for h in range(cfg.num_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = T.reshape(T.slice_cols(q, lo, hi), (n_seq, width, dh))
            kh = T.reshape(T.slice_cols(k, lo, hi), (n_seq, width, dh))
            vh = T.reshape(T.slice_cols(v, lo, hi), (n_seq, width, dh))
            scores = T.scale(T.bmatmul(qh, kh, transpose_b=True), 1.0 / math.sqrt(dh))
            mixed = T.bmatmul(T.masked_softmax(scores, allowed), vh)
            heads.append(T.reshape(mixed, (n_seq * width, dh)))
        att = heads[0] if len(heads) == 1 else T.concat_cols(heads)
        x = T.add(x, T.add_bias(T.matmul(att, P[pre + "attn.wo"]), P[pre + "attn.bo"]))
        a = T.layer_norm(x, P[pre + "ln2.gain"], P[pre + "ln2.bias"])
        hdn = T.gelu(T.add_bias(T.matmul(a, P[pre + "ffn.w1"]), P[pre + "ffn.b1"]))
        x = T.add(x, T.add_bias(T.matmul(hdn, P[pre + "ffn.w2"]), P[pre + "ffn.b2"]))
    return T.layer_norm(x, P["final_ln.gain"], P["final_ln.bias"]), width


def _query_rows(queries: Sequence[tuple[int, int]], seqs, width: int, mode: str) -> np.ndarray:
    rows = []
    for s, p in queries:
        n = len(seqs[s])
        if mode == FULL:
            if not 0 <= p < n:
                raise IndexError(f"position {p} out of range for sequence of length {n}")
            rows.append(s * width + p)
        else:
            if not 1 <= p <= n:
                raise IndexError(f"prefix position {p} must lie in [1, {n}]")
            rows.append(s * width + p - 1)
    return np.asarray(rows, np.int64)


def _tensors(model: ParamStore, tape: T.Tape | None, trainable: Iterable[str] | None):
    if tape is None:
        return {k: T.Tensor(v) for k, v in model.items()}
    names = set(model.names() if trainable is None else trainable)
    return {k: tape.watch(k, v) if k in names else T.Tensor(v) for k, v in model.items()}


def batch_logits(model: ParamStore, seqs: Sequence[Sequence[int]],
                 queries: Sequence[tuple[int, int]], tape: T.Tape | None = None,
                 trainable: Iterable[str] | None = None) -> T.Tensor:
    """Logits (len(queries), vocab) for ``(sequence index, position)`` queries.

    Full-context mode reads the hidden state at ``position`` (which should
    hold MASK); prefix mode reads the state after ``tokens[:position]``.
    """
    P = _tensors(model, tape, trainable)
    hidden, width = _hidden(P, seqs, model.config)
    rows = _query_rows(queries, seqs, width, model.config.mode)
    return T.add_bias(T.matmul(T.take_rows(hidden, rows), P["head.weight"]), P["head.bias"])


def _check_full_mask(model: ParamStore, tokens, position):
    if model.config.mode == FULL and 0 <= position < len(tokens) and tokens[position] != Vocab.mask_id:
        raise ValueError(f"full-context prediction needs MASK at position {position}")


def forward_logits(model: ParamStore, tokens: Sequence[int], position: int) -> np.ndarray:
    _check_full_mask(model, tokens, position)
    return batch_logits(model, [list(tokens)], [(0, position)]).data[0].astype(np.float64)


def target_loss(model: ParamStore, tokens: Sequence[int], position: int, target: int,
                trainable: Iterable[str] | None = None) -> T.Tensor:
    """Tape-tracked cross-entropy of ``target`` at ``position``; call ``T.backward`` on it."""
    _check_full_mask(model, tokens, position)
    if not 0 <= target < model.config.vocab_size:
        raise IndexError(f"target {target} outside vocabulary")
    tape = T.Tape()
    logits = batch_logits(model, [list(tokens)], [(0, position)], tape=tape, trainable=trainable)
    return T.softmax_cross_entropy(T.row(logits, 0), target)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_distribution(model: ParamStore, tokens: Sequence[int], position: int) -> np.ndarray:
    return _softmax(forward_logits(model, tokens, position))


def predict_distributions(model: ParamStore, items: Sequence[tuple[Sequence[int], int]],
                          chunk: int = 64) -> np.ndarray:
    """Batched :func:`predict_distribution` over ``(tokens, position)`` pairs."""
    out = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        seqs = [list(t) for t, _ in part]
        for t, p in part:
            _check_full_mask(model, t, p)
        logits = batch_logits(model, seqs, [(i, p) for i, (_, p) in enumerate(part)]).data
        out.append(_softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, model.config.vocab_size))


# ---------------------------------------------------------------- training

def mask_sequence(tokens: Sequence[int], positions: Iterable[int]) -> list[int]:
    out = list(tokens)
    for p in positions:
        out[p] = Vocab.mask_id
    return out


def _choose_positions(rng: np.random.Generator, n: int, rate: float, lo: int = 0) -> list[int]:
    cand = np.arange(lo, n)
    picked = cand[rng.random(len(cand)) < rate]
    if picked.size == 0:
        picked = np.array([cand[rng.integers(len(cand))]])
    return sorted(int(p) for p in picked)


def _make_batch(model: ParamStore, seqs, rng, mask_rate, focus, focus_rate=0.8):
    """Turn raw sequences into (inputs, queries, targets) for one training step.

    With ``focus``, one focus token per sequence is masked with probability
    ``focus_rate`` and the other focus tokens stay visible, so the context
    that determines a class-bearing token is never hidden together with it.
    """
    inputs, queries, targets = [], [], []
    for i, s in enumerate(seqs):
        if model.config.mode == FULL:
            pos = set(_choose_positions(rng, len(s), mask_rate))
            if focus is not None:
                fpos = [p for p, t in enumerate(s) if t in focus]
                pos.difference_update(fpos)
                if fpos and rng.random() < focus_rate:
                    pos.add(fpos[int(rng.integers(len(fpos)))])
                if not pos:
                    pos.add(int(rng.integers(len(s))))
            pos = sorted(pos)
            inputs.append(mask_sequence(s, pos))
        else:
            pos = list(range(1, len(s)))
            inputs.append(list(s))
        queries += [(i, p) for p in pos]
        targets += [s[p] for p in pos]
    return inputs, queries, targets


def train_lm(model: ParamStore, corpus: Sequence[Sequence[int]], steps: int, lr: float = 3e-4,
             seed: int = 0, batch_size: int = 32, mask_rate: float = 0.15,
             focus_ids: Iterable[int] | None = None, log_every: int = 0) -> list[float]:
    """Train in place with Adam on the masked-token (or next-token) loss.

    ``focus_ids`` mark class-bearing tokens (names, pronouns, attributes);
    see :func:`_make_batch` for how they are masked.  Returns the per-step
    loss history.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if model.config.mode == PREFIX and min(len(s) for s in corpus) < 2:
        raise ValueError("prefix-mode training needs sequences of length >= 2")
    rng = np.random.default_rng(seed)
    focus = None if focus_ids is None else frozenset(int(i) for i in focus_ids)
    opt = Adam(lr=lr)
    params = model.as_dict()
    history: list[float] = []
    for step in range(steps):
        idx = rng.integers(0, len(corpus), size=min(batch_size, len(corpus)))
        inputs, queries, targets = _make_batch(model, [corpus[i] for i in idx], rng, mask_rate, focus)
        tape = T.Tape()
        logits = batch_logits(model, inputs, queries, tape=tape)
        loss = T.cross_entropy_rows(logits, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise T.NumericError(f"non-finite training loss at step {step}: {value}")
        grads = tape.backward(loss)
        opt.step(params, grads)
        for k, v in params.items():
            model[k] = v
        history.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("train_lm step %d loss %.4f", step + 1, float(np.mean(history[-log_every:])))
    return history


# ---------------------------------------------------------------- evaluation

def masked_accuracy(model: ParamStore, corpus: Sequence[Sequence[int]], mask_rate: float = 0.15,
                    seed: int = 0, chunk: int = 64) -> float:
    """Share of masked positions whose argmax prediction is the original token.

    Mask positions are drawn per sequence from ``seed`` (at least one per
    sequence).  In prefix mode the chosen positions are predicted from their
    prefix instead.
    """
    return float(masked_hits(model, corpus, mask_rate, seed, chunk).mean())


def masked_hits(model: ParamStore, corpus: Sequence[Sequence[int]], mask_rate: float = 0.15,
                seed: int = 0, chunk: int = 64) -> np.ndarray:
    """Per masked position: 1.0 if the argmax prediction is the original token."""
    if not corpus:
        raise ValueError("empty corpus")
    if not 0 < mask_rate < 1:
        raise ValueError("mask_rate must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    lo = 1 if model.config.mode == PREFIX else 0
    hits = []
    for start in range(0, len(corpus), chunk):
        part = corpus[start:start + chunk]
        inputs, queries, targets = [], [], []
        for i, s in enumerate(part):
            pos = _choose_positions(rng, len(s), mask_rate, lo=lo)
            inputs.append(mask_sequence(s, pos) if model.config.mode == FULL else list(s))
            queries += [(i, p) for p in pos]
            targets += [s[p] for p in pos]
        pred = batch_logits(model, inputs, queries).data.argmax(axis=1)
        hits.append(pred == np.asarray(targets))
    return np.concatenate(hits).astype(np.float64)


def perplexity(model: ParamStore, corpus: Sequence[Sequence[int]], chunk: int = 64) -> float:
    """exp of the mean next-token negative log-likelihood (prefix mode only)."""
    if model.config.mode != PREFIX:
        raise ValueError("perplexity is defined for prefix-only models")
    if not corpus:
        raise ValueError("empty corpus")
    nll, count = 0.0, 0
    for start in range(0, len(corpus), chunk):
        part = [list(s) for s in corpus[start:start + chunk] if len(s) >= 2]
        if not part:
            continue
        queries = [(i, p) for i, s in enumerate(part) for p in range(1, len(s))]
        targets = np.array([part[i][p] for i, p in queries])
        logits = batch_logits(model, part, queries).data.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        nll -= lsm[np.arange(len(targets)), targets].sum()
        count += len(targets)
    if count == 0:
        raise ValueError("corpus has no sequence with a next-token prediction")
    return float(math.exp(nll / count))


def final_hidden_mean(model: ParamStore, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean final-layer hidden state per sequence (sentence embedding)."""
    P = _tensors(model, None, None)
    hidden, width = _hidden(P, [list(s) for s in seqs], model.config)
    h = hidden.data.astype(np.float64).reshape(len(seqs), width, -1)
    lengths = np.array([len(s) for s in seqs])
    mask = np.arange(width)[None, :] < lengths[:, None]
    return (h * mask[..., None]).sum(axis=1) / lengths[:, None]

