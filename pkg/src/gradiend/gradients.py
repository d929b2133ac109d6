"""Flattened body-parameter gradients for factual and orthogonal targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import Template
from .lm import ParamStore, Vocab, batch_logits


@dataclass(frozen=True)
class FlatIndexMap:
    """Contiguous layout of the body parameters (head excluded) in one vector."""

    entries: tuple[tuple[str, tuple[int, ...], int], ...]
    n: int

    @property
    def names(self) -> list[str]:
        return [e[0] for e in self.entries]

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.n, dtype=np.float32)
        for name, shape, off in self.entries:
            a = np.asarray(arrays[name])
            if a.shape != shape:
                raise T.ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
            out[off:off + a.size] = a.reshape(-1)
        return out

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        vec = np.asarray(vec)
        if vec.shape != (self.n,):
            raise T.ShapeError(f"expected a vector of length {self.n}, got shape {vec.shape}")
        return {name: vec[off:off + int(np.prod(shape, dtype=np.int64))].reshape(shape)
                for name, shape, off in self.entries}

    def check(self, model: ParamStore) -> None:
        """Raise if ``model``'s body does not match this layout."""
        if self.names != model.body_names():
            raise ValueError("index map does not match the model's body parameters")
        for name, shape, _ in self.entries:
            if model[name].shape != shape:
                raise ValueError(f"index map shape mismatch for {name}")

    def to_json(self) -> list:
        return [[name, list(shape), off] for name, shape, off in self.entries]

    @classmethod
    def from_json(cls, obj: list) -> "FlatIndexMap":
        entries = tuple((name, tuple(shape), int(off)) for name, shape, off in obj)
        n = entries[-1][2] + int(np.prod(entries[-1][1])) if entries else 0
        return cls(entries, n)


def build_flat_index(model: ParamStore) -> FlatIndexMap:
    entries, off = [], 0
    for name in model.body_names():
        shape = tuple(model[name].shape)
        entries.append((name, shape, off))
        off += model[name].size
    return FlatIndexMap(tuple(entries), off)


@dataclass(frozen=True)
class GradientSample:
    factual_class: str
    grad_factual: np.ndarray
    grad_orthogonal: np.ndarray
    grad_diff: np.ndarray


def _single_token(vocab: Vocab, token: str) -> int:
    if not token or any(ch.isspace() for ch in token) or token not in vocab:
        raise ValueError(f"target {token!r} is not a single vocabulary token")
    return vocab.id(token)


def _orthogonal_token(instance: Template, orthogonal_class: str) -> str:
    if orthogonal_class == instance.factual_class:
        raise ValueError("orthogonal class must differ from the factual class")
    targets = instance.orthogonal_targets.get(orthogonal_class)
    if not targets:
        raise ValueError(f"instance has no target for class {orthogonal_class!r}")
    if len(targets) != 1:
        raise ValueError(f"class {orthogonal_class!r} has {len(targets)} target tokens; exactly one is supported")
    return targets[0]


def _grad(model: ParamStore, index: FlatIndexMap, seqs, queries, targets) -> np.ndarray:
    tape = T.Tape()
    logits = batch_logits(model, seqs, queries, tape=tape, trainable=index.names)
    loss = T.cross_entropy_rows(logits, targets)
    return index.flatten(tape.backward(loss))


def _encode_instance(vocab: Vocab, instance: Template, model: ParamStore):
    # full-context: mask the slot; prefix: keep only the prefix before it
    toks = instance.filled(Vocab.MASK)
    if model.config.mode != "full-context":
        toks = toks[: instance.target_slot]
    return vocab.encode(toks), instance.target_slot


def factual_gradient(model: ParamStore, vocab: Vocab, instance: Template,
                     index: FlatIndexMap | None = None) -> np.ndarray:
    """Body gradient of the loss for the instance's factual target only."""
    index = index or build_flat_index(model)
    ids, pos = _encode_instance(vocab, instance, model)
    return _grad(model, index, [ids], [(0, pos)], [_single_token(vocab, instance.factual_target)])


def extract_gradients(model: ParamStore, vocab: Vocab, instance: Template, orthogonal_class: str,
                      index: FlatIndexMap | None = None) -> GradientSample:
    """Two separate backward passes on identical inputs: factual then orthogonal target."""
    index = index or build_flat_index(model)
    ids, pos = _encode_instance(vocab, instance, model)
    fact = _single_token(vocab, instance.factual_target)
    orth = _single_token(vocab, _orthogonal_token(instance, orthogonal_class))
    g_f = _grad(model, index, [ids], [(0, pos)], [fact])
    g_o = _grad(model, index, [ids], [(0, pos)], [orth])
    return GradientSample(instance.factual_class, g_f, g_o, g_f - g_o)


def extract_batch(model: ParamStore, vocab: Vocab, instances: Sequence[Template], orthogonal_class: str,
                  index: FlatIndexMap | None = None) -> GradientSample:
    """Batch-averaged sample computed from the mean loss in one pass per target.

    The gradient of a mean loss is the mean of the per-instance gradients, so
    this equals ``batch_accumulate`` of per-instance :func:`extract_gradients`
    up to rounding.
    """
    if not instances:
        raise ValueError("empty batch")
    classes = {i.factual_class for i in instances}
    if len(classes) != 1:
        raise ValueError(f"batch mixes factual classes {sorted(classes, key=str)}")
    index = index or build_flat_index(model)
    enc = [_encode_instance(vocab, i, model) for i in instances]
    seqs = [e[0] for e in enc]
    queries = [(k, e[1]) for k, e in enumerate(enc)]
    fact = [_single_token(vocab, i.factual_target) for i in instances]
    orth = [_single_token(vocab, _orthogonal_token(i, orthogonal_class)) for i in instances]
    g_f = _grad(model, index, seqs, queries, fact)
    g_o = _grad(model, index, seqs, queries, orth)
    return GradientSample(classes.pop(), g_f, g_o, g_f - g_o)


def batch_accumulate(samples: Sequence[GradientSample]) -> GradientSample:
    """Arithmetic mean of each gradient field; all samples must share one class."""
    if not samples:
        raise ValueError("cannot accumulate an empty batch")
    classes = {s.factual_class for s in samples}
    if len(classes) != 1:
        raise ValueError(f"batch mixes factual classes {sorted(classes, key=str)}")

    def mean(field):
        acc = np.zeros(samples[0].grad_factual.shape, dtype=np.float64)
        for s in samples:
            acc += getattr(s, field)
        return (acc / len(samples)).astype(np.float32)

    g_f, g_o = mean("grad_factual"), mean("grad_orthogonal")
    return GradientSample(samples[0].factual_class, g_f, g_o, g_f - g_o)
