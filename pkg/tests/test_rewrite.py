import numpy as np
import pytest

from gradiend import corpus as C
from gradiend import io as gio
from gradiend import metrics as M
from gradiend.core import init_gradiend
from gradiend.gradients import build_flat_index
from gradiend.lm import Vocab
from gradiend.rewrite import (DEFAULT_FEATURE_FACTORS, DEFAULT_LEARNING_RATES, SweepCell, SweepGrid,
                              point_symmetry_residual, rewrite, select, sweep)


@pytest.fixture
def gradiend(tiny_model):
    idx = build_flat_index(tiny_model)
    return init_gradiend(idx.n, seed=11, index=idx, class_pair=(C.FEMALE, C.MALE))


@pytest.fixture
def probe_setup(lexicon, vocab):
    probes = C.gen_probe_set(lexicon, 8, seed=1)
    items = [(vocab.encode([Vocab.MASK if t == C.NAME else t for t in p.tokens]), p.name_slot) for p in probes]
    return items, M.gender_targets(vocab, lexicon.names)


def _flat(model, g):
    return g.index.flatten(model.as_dict()).astype(np.float64)


def test_alpha_zero_is_identity(tiny_model, gradiend):
    assert rewrite(tiny_model, gradiend, 5.0, 0.0).tobytes() == tiny_model.tobytes()


def test_h_zero_adds_bias(tiny_model, gradiend):
    out = rewrite(tiny_model, gradiend, 0.0, 0.3)
    delta = _flat(out, gradiend) - _flat(tiny_model, gradiend)
    np.testing.assert_allclose(delta, 0.3 * gradiend.b_dec, atol=1e-7)


def test_head_untouched_and_input_unchanged(tiny_model, gradiend):
    before = tiny_model.tobytes()
    out = rewrite(tiny_model, gradiend, 1.0, 0.5)
    for n in tiny_model.head_names():
        assert out[n].tobytes() == tiny_model[n].tobytes()
    assert tiny_model.tobytes() == before
    assert out.tobytes() != before


def test_rewrite_affine_in_alpha(tiny_model, gradiend):
    once = rewrite(tiny_model, gradiend, 0.6, 0.2)
    twice = rewrite(rewrite(tiny_model, gradiend, 0.6, 0.1), gradiend, 0.6, 0.1)
    np.testing.assert_allclose(_flat(once, gradiend), _flat(twice, gradiend), atol=1e-6)


def test_index_mismatch(tiny_model, gradiend):
    from dataclasses import replace
    with pytest.raises(ValueError):
        rewrite(tiny_model, replace(gradiend, index=None), 1.0, 1.0)
    from gradiend.lm import ModelConfig, build_model
    other = build_model(ModelConfig(embed_dim=4, num_heads=2, ffn_mult=2))
    with pytest.raises(ValueError):
        rewrite(other, gradiend, 1.0, 1.0)


@pytest.mark.parametrize("h", [0.2, 1.0, 10.0])
def test_point_symmetry(tiny_model, gradiend, h):
    assert point_symmetry_residual(tiny_model, gradiend, h, 0.5) <= 1e-5
    assert point_symmetry_residual(tiny_model, gradiend, h, 0.0) == 0.0


def test_default_grid():
    g = SweepGrid()
    assert len(g.feature_factors) == 15 and len(g.learning_rates) == 16
    cells = g.cells()
    assert len(cells) == 15 * 16 + 1 and cells[0] == (0.0, 0.0)
    assert cells[1] == (DEFAULT_FEATURE_FACTORS[0], DEFAULT_LEARNING_RATES[0])
    assert cells[2] == (DEFAULT_FEATURE_FACTORS[0], DEFAULT_LEARNING_RATES[1])
    assert len(SweepGrid(include_base_cell=False).cells()) == 240


def test_grid_validation():
    with pytest.raises(ValueError):
        SweepGrid(feature_factors=(0.0, 1.0))
    with pytest.raises(ValueError):
        SweepGrid(learning_rates=(1.0, -1.0, 1.0, -1.0))


def test_sweep_base_cell_and_recomputation(tiny_model, gradiend, probe_setup):
    items, targets = probe_setup
    neutral = [[5, 6, 7, 8, 9]] * 6

    def lms(m):
        return M.lms_dec(m, neutral)

    grid = SweepGrid((0.0, 1.0, -1.0), (0.1, -0.1))
    cells = sweep(tiny_model, gradiend, grid, items, targets, lms)
    assert [(c.h, c.alpha) for c in cells] == grid.cells()
    base = cells[0]
    direct = M.probe_probabilities(tiny_model, items, targets)
    assert base.p_a == pytest.approx(direct.p_a.mean(), abs=1e-12)
    assert base.lms == lms(tiny_model)
    for c in cells:
        res = M.probe_probabilities(rewrite(tiny_model, gradiend, c.h, c.alpha), items, targets)
        assert (c.bpi, c.fpi, c.mpi) == pytest.approx(M.selection_scores(res, c.lms), abs=1e-12)
    again = sweep(tiny_model, gradiend, grid, items, targets, lms)
    cols = gio.SWEEP_COLUMNS
    assert gio.csv_bytes([c.as_row() for c in cells], cols) == gio.csv_bytes([c.as_row() for c in again], cols)


def test_sweep_records_failures(tiny_model, gradiend, probe_setup):
    items, targets = probe_setup

    def lms(m):
        if not np.array_equal(m["embed.tok"], tiny_model["embed.tok"]):
            raise FloatingPointError("boom")
        return 0.5

    cells = sweep(tiny_model, gradiend, SweepGrid((0.0,), (1.0, -1.0)), items, targets, lms)
    assert cells[0].ok
    assert all(c.status.startswith("failed: FloatingPointError") for c in cells[1:])
    assert np.isnan(cells[1].bpi)
    assert select(cells, "bpi") is cells[0]


def test_select_examples():
    base = SweepCell(0.0, 0.0, bpi=0.322, fpi=0.1, mpi=0.1)
    better = SweepCell(0.0, 1e-2, bpi=0.363, fpi=0.1, mpi=0.1)
    assert select([base, better], "BPI") is better
    assert select([base], "fpi") is base
    a = SweepCell(0.4, 0.5, bpi=0.5)
    b = SweepCell(0.4, 0.1, bpi=0.5)
    c = SweepCell(-0.2, 0.1, bpi=0.5)
    assert select([a, b], "bpi") is b
    assert select([a, b, c], "bpi") is c
    with pytest.raises(ValueError):
        select([base], "xyz")
    with pytest.raises(ValueError):
        select([SweepCell(1.0, 1.0, status="failed: x")], "bpi")
