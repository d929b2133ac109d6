import numpy as np
import pytest

from gradiend import corpus as C
from gradiend import tensor as T
from gradiend.gradients import (FlatIndexMap, GradientSample, batch_accumulate, build_flat_index, extract_batch,
                                extract_gradients, factual_gradient)
from gradiend.lm import Vocab, target_loss


@pytest.fixture
def instances(templates, lexicon):
    f = lexicon.exact_names(C.FEMALE)
    return [t.instantiate(f[i].name, C.FEMALE) for i, t in enumerate(templates[:4])]


def test_flat_index_layout(tiny_model):
    idx = build_flat_index(tiny_model)
    assert idx.names == sorted(idx.names)
    assert not any(n.startswith("head.") for n in idx.names)
    assert idx.n == sum(tiny_model[n].size for n in tiny_model.body_names())
    off = 0
    for name, shape, o in idx.entries:
        assert o == off
        off += int(np.prod(shape))


def test_flatten_roundtrip(tiny_model):
    idx = build_flat_index(tiny_model)
    vec = idx.flatten(tiny_model.as_dict())
    back = idx.unflatten(vec)
    for n in idx.names:
        assert np.array_equal(back[n], tiny_model[n])
    with pytest.raises(T.ShapeError):
        idx.unflatten(vec[:-1])
    assert FlatIndexMap.from_json(idx.to_json()) == idx


def test_index_check(tiny_model, tiny_prefix_model):
    idx = build_flat_index(tiny_model)
    idx.check(tiny_prefix_model)  # same architecture
    bad = FlatIndexMap(idx.entries[1:], idx.n)
    with pytest.raises(ValueError):
        bad.check(tiny_model)


def test_factual_gradient_matches_direct_backward(tiny_model, vocab, instances):
    inst = instances[0]
    idx = build_flat_index(tiny_model)
    g = factual_gradient(tiny_model, vocab, inst, idx)
    ids = vocab.encode(inst.filled(Vocab.MASK))
    loss = target_loss(tiny_model, ids, inst.target_slot, vocab.id("she"))
    direct = idx.flatten(T.backward(loss))
    np.testing.assert_allclose(g, direct, rtol=1e-6, atol=1e-8)
    assert g.shape == (idx.n,)


def test_diff_is_factual_minus_orthogonal(tiny_model, vocab, instances):
    s = extract_gradients(tiny_model, vocab, instances[0], C.MALE)
    np.testing.assert_array_equal(s.grad_diff, s.grad_factual - s.grad_orthogonal)
    assert s.factual_class == C.FEMALE
    assert np.abs(s.grad_diff).max() > 0


def test_batch_equals_mean_of_instances(tiny_model, vocab, instances):
    batched = extract_batch(tiny_model, vocab, instances, C.MALE)
    singles = batch_accumulate([extract_gradients(tiny_model, vocab, i, C.MALE) for i in instances])
    for f in ("grad_factual", "grad_orthogonal", "grad_diff"):
        np.testing.assert_allclose(getattr(batched, f), getattr(singles, f), rtol=1e-4, atol=1e-7)


def test_prefix_model_uses_prefix(tiny_prefix_model, vocab, instances):
    # tokens after the target slot must not change the gradient
    inst = instances[0]
    toks = list(inst.tokens)
    toks[-1] = "the" if toks[-1] != "the" else "and"
    altered = C.Template(tuple(toks), inst.target_slot, inst.name_slot, inst.factual_class, inst.factual_target,
                         inst.orthogonal_targets)
    a = factual_gradient(tiny_prefix_model, vocab, inst)
    b = factual_gradient(tiny_prefix_model, vocab, altered)
    np.testing.assert_array_equal(a, b)


def test_target_errors(tiny_model, vocab, instances):
    inst = instances[0]
    with pytest.raises(ValueError):
        extract_gradients(tiny_model, vocab, inst, C.FEMALE)
    with pytest.raises(ValueError):
        extract_gradients(tiny_model, vocab, inst, "X")
    multi = C.Template(inst.tokens, inst.target_slot, inst.name_slot, C.FEMALE, "she", {C.MALE: ["he", "him"]})
    with pytest.raises(ValueError):
        extract_gradients(tiny_model, vocab, multi, C.MALE)
    oov = C.Template(inst.tokens, inst.target_slot, inst.name_slot, C.FEMALE, "she", {C.MALE: ["they"]})
    with pytest.raises(ValueError):
        extract_gradients(tiny_model, vocab, oov, C.MALE)


def test_batch_errors(tiny_model, vocab, instances, lexicon, templates):
    with pytest.raises(ValueError):
        extract_batch(tiny_model, vocab, [], C.MALE)
    male = templates[5].instantiate(lexicon.exact_names(C.MALE)[0].name, C.MALE)
    with pytest.raises(ValueError):
        extract_batch(tiny_model, vocab, [instances[0], male], C.MALE)


def test_batch_accumulate_mean():
    a = GradientSample("A", np.array([1.0, 2.0], np.float32), np.array([0.0, 1.0], np.float32),
                       np.array([1.0, 1.0], np.float32))
    b = GradientSample("A", np.array([3.0, 4.0], np.float32), np.array([2.0, 1.0], np.float32),
                       np.array([1.0, 3.0], np.float32))
    m = batch_accumulate([a, b])
    np.testing.assert_array_equal(m.grad_factual, [2.0, 3.0])
    np.testing.assert_array_equal(m.grad_diff, [1.0, 2.0])
    with pytest.raises(ValueError):
        batch_accumulate([a, GradientSample("B", a.grad_factual, a.grad_orthogonal, a.grad_diff)])
    with pytest.raises(ValueError):
        batch_accumulate([])
