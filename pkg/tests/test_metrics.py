import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradiend import corpus as C
from gradiend import metrics as M
from gradiend.core import Gradiend
from gradiend.lm import PREFIX, ModelConfig, Vocab, build_model


def brute_pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    num = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    den = math.sqrt(sum((x - mx) ** 2 for x in xs)) * math.sqrt(sum((y - my) ** 2 for y in ys))
    return num / den


def test_pearson_examples():
    assert M.pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert M.pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)
    # hand oracle: means 2.5 / 3.75, Sxy = 3.5, Sxx = 5, Syy = 4.75
    assert M.pearson([1, 2, 3, 4], [2, 4, 5, 4]) == pytest.approx(3.5 / math.sqrt(5 * 4.75), abs=1e-12)
    assert M.pearson([1, 2, 3, 4], [2, 4, 5, 4]) == pytest.approx(brute_pearson([1, 2, 3, 4], [2, 4, 5, 4]), abs=1e-12)
    with pytest.raises(M.UndefinedCorrelation):
        M.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        M.pearson([1], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=30),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(pairs, a, b):
    xs = np.array([p[0] for p in pairs])
    ys = np.array([p[1] for p in pairs])
    if np.ptp(xs) < 1e-3 or np.ptp(ys) < 1e-3:
        return
    r = M.pearson(xs, ys)
    assert M.pearson(a * xs + b, ys) == pytest.approx(r, abs=1e-9)
    assert M.pearson(-a * xs, ys) == pytest.approx(-r, abs=1e-9)


def _gradiend_identity(n=3):
    w = np.zeros(n, np.float32)
    w[0] = 1.0
    return Gradiend(w, 0.0, w.copy(), w.copy(), class_pair=("F", "M"))


def test_cor_t_examples():
    g = _gradiend_identity()
    fac = np.zeros((4, 3), np.float32)
    fac[:, 0] = [10, 10, -10, -10]  # tanh saturates at +-1
    labels = ["F", "F", "M", "M"]
    assert M.cor_t(g, fac, labels) == pytest.approx(1.0)
    flipped = Gradiend(-g.w_enc, 0.0, g.w_dec, g.b_dec, class_pair=("F", "M"))
    assert M.cor_t(flipped, fac, labels) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        M.cor_t(g, fac[:2], labels[:2])


def test_cor_enc_balanced_and_exact():
    g = _gradiend_identity()
    pre = {M.CLASS_A_TEST: 10.0, M.CLASS_B_TEST: -10.0, M.NEUTRAL_MASKED: 0.0, M.INDEPENDENT_NEUTRAL: 0.0}
    label = {M.CLASS_A_TEST: 1, M.CLASS_B_TEST: -1, M.NEUTRAL_MASKED: 0, M.INDEPENDENT_NEUTRAL: 0}
    sizes = {M.CLASS_A_TEST: 7, M.CLASS_B_TEST: 5, M.NEUTRAL_MASKED: 9, M.INDEPENDENT_NEUTRAL: 4}
    tags = [t for t, k in sizes.items() for _ in range(k)]
    fac = np.zeros((len(tags), 3), np.float32)
    fac[:, 0] = [pre[t] for t in tags]
    es = M.EvalSet(fac, [label[t] for t in tags], tags, [str(i) for i in range(len(tags))])
    r, rows = M.cor_enc(g, es, seed=0)
    assert r == pytest.approx(1.0)
    used = [tags[i] for i in rows]
    assert all(used.count(t) == 4 for t in sizes)
    zero = Gradiend(np.zeros(3, np.float32), 0.0, g.w_dec, g.b_dec, class_pair=("F", "M"))
    with pytest.raises(M.UndefinedCorrelation):
        M.cor_enc(zero, es)
    only_pm = es.subset([i for i, t in enumerate(tags) if t in (M.CLASS_A_TEST, M.CLASS_B_TEST)])
    with pytest.raises(ValueError):
        M.cor_enc(g, only_pm)


def test_evalset_validation():
    with pytest.raises(ValueError):
        M.EvalSet(np.zeros((2, 3)), [1, 2], ["a", "b"], ["0", "1"])
    with pytest.raises(ValueError):
        M.EvalSet(np.zeros((2, 3)), [1], ["a", "b"], ["0", "1"])


def test_class_probability_examples():
    names = [C.NameRecord("ana", 1.0), C.NameRecord("bob", 0.0), C.NameRecord("sky", 0.373)]
    vocab = Vocab(["ana", "bob", "sky"] + [f"w{i}" for i in range(195)])
    targets = M.gender_targets(vocab, names)
    d = np.zeros((3, len(vocab)))
    d[0, vocab.id("ana")] = 1.0
    d[1, vocab.id("sky")] = 1.0
    d[2] = 1.0 / len(vocab)
    res = M.class_probability(d, targets)
    assert (res.p_a[0], res.p_b[0]) == (1.0, 0.0)
    assert res.p_a[1] == pytest.approx(0.373)
    assert res.p_b[1] == pytest.approx(0.627)
    np.testing.assert_allclose(res.p_union, res.p_a + res.p_b)


def test_attribute_probability_counting():
    toks = [f"a{i}" for i in range(10)] + [f"b{i}" for i in range(10)] + [f"w{i}" for i in range(178)]
    vocab = Vocab(toks)
    targets = M.attribute_targets(vocab, C.ClassSpec("ava", tuple(toks[:10])), C.ClassSpec("bel", tuple(toks[10:20])))
    uniform = np.full((1, 200), 1 / 200)
    res = M.class_probability(uniform, targets)
    assert res.p_a[0] == pytest.approx(0.05)
    with pytest.raises(ValueError):
        M.attribute_targets(vocab, C.ClassSpec("ava", ("a0",)), C.ClassSpec("bel", ("a0",)))
    with pytest.raises(ValueError):
        M.ClassTargets(("x", "y"), np.zeros(3), np.ones(3))


def test_probe_result_ranges():
    with pytest.raises(ValueError):
        M.ProbeResult(np.array([0.7]), np.array([0.6]))
    with pytest.raises(ValueError):
        M.ProbeResult(np.array([-0.1]), np.array([0.6]))


def brute_scores(pa, pb, lms):
    t = len(pa)
    bpi = fpi = mpi = 0.0
    for a, b in zip(pa, pb):
        bpi += (1 - abs(a - b)) * (a + b)
        fpi += (1 - b) * a
        mpi += (1 - a) * b
    return lms / t * bpi, lms / t * fpi, lms / t * mpi


def test_selection_score_examples():
    half = M.ProbeResult(np.full(4, 0.5), np.full(4, 0.5))
    assert M.selection_scores(half, 1.0)[0] == pytest.approx(1.0)
    extreme = M.ProbeResult(np.array([1.0]), np.array([0.0]))
    assert M.selection_scores(extreme, 1.0) == pytest.approx((0.0, 1.0, 0.0))
    bpi, _, _ = M.selection_scores(M.ProbeResult(np.array([0.3]), np.array([0.5])), 0.8)
    assert bpi == pytest.approx(0.512, abs=1e-12)
    with pytest.raises(ValueError):
        M.selection_scores(half, 1.5)


def test_selection_scores_match_brute_force(rng):
    for _ in range(20):
        m = int(rng.integers(1, 50))
        u = rng.random(m)
        pa = u * rng.random(m)
        pb = (u - pa) * rng.random(m) + 0.0
        lms = float(rng.random())
        got = M.selection_scores(M.ProbeResult(pa, pb), lms)
        assert got == pytest.approx(brute_scores(pa.tolist(), pb.tolist(), lms), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20), st.floats(0, 1))
def test_selection_scores_in_unit_interval_and_monotone(pairs, lms):
    pa = np.array([a * (1 - b) for a, b in pairs])
    pb = np.array([b * (1 - a * (1 - b)) for a, b in pairs])
    pb = np.minimum(pb, 1 - pa)
    res = M.ProbeResult(pa, pb)
    scores = M.selection_scores(res, lms)
    assert all(-1e-12 <= s <= 1 + 1e-12 for s in scores)
    assert M.selection_scores(res, 1.0)[0] >= scores[0] - 1e-12


def _always(vocab_size, token_id, mode="full-context"):
    m = build_model(ModelConfig(vocab_size=vocab_size, embed_dim=8, num_heads=2, ffn_mult=2, mode=mode))
    m["head.weight"] = np.zeros_like(m["head.weight"])
    bias = np.zeros(vocab_size, np.float32)
    if token_id is not None:
        bias[token_id] = 50.0
    m["head.bias"] = bias
    return m


def test_lms_dec_examples():
    memorizer = _always(200, 7)
    assert M.lms_dec(memorizer, [[7, 7, 7, 7]] * 5) == 1.0
    uniform = _always(200, None, mode=PREFIX)
    assert M.lms_dec(uniform, [[3, 4, 5, 6]] * 3) == pytest.approx(1 / 201, rel=1e-6)
    with pytest.raises(ValueError):
        M.lms_dec(memorizer, [[7, 7]], mode=PREFIX)
    with pytest.raises(ValueError):
        M.lms_dec(memorizer, [])


def test_ss_from_scores_rules():
    always_anti = np.array([[0.1, 0.5, 0.0]] * 10)
    assert M.ss_from_scores(always_anti).ss == 0.0
    ties = M.ss_from_scores(np.array([[0.3, 0.3, 0.1]] * 4))
    assert ties.ss == 0.0 and ties.ties == 4
    meaningless_wins = M.ss_from_scores(np.array([[0.3, 0.3, 0.3], [0.5, 0.1, 0.2]]))
    assert meaningless_wins.n_meaningful == 1 and meaningless_wins.lms_ss == 0.5 and meaningless_wins.ss == 1.0
    with pytest.raises(ValueError):
        M.ss_from_scores(np.zeros((3, 2)))


def test_ss_sixty_forty(rng):
    n = 500
    prefer = rng.random(n) < 0.6
    scores = np.where(prefer[:, None], [0.5, 0.3, 0.1], [0.3, 0.5, 0.1])
    res = M.ss_from_scores(scores)
    assert abs(res.ss - 0.6) <= 3 * math.sqrt(0.6 * 0.4 / n)
    anti = float((scores[:, 1] > scores[:, 0]).mean())
    assert res.ss + anti == pytest.approx(1.0)


def test_ss_score_on_model(lexicon, vocab):
    probes = C.gen_stereo_probes(lexicon, 10, seed=0)
    rigged = _always(200, vocab.id(probes[0].stereotypical))
    res = M.ss_score(rigged, vocab, probes[:1])
    assert res.ss == 1.0 and res.lms_ss == 1.0
    with pytest.raises(ValueError):
        M.ss_score(rigged, vocab, [])


def brute_weat(x, y, a, b):
    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    def s(w):
        return np.mean([cos(w, ai) for ai in a]) - np.mean([cos(w, bi) for bi in b])

    sx, sy = [s(w) for w in x], [s(w) for w in y]
    return (np.mean(sx) - np.mean(sy)) / np.std(sx + sy, ddof=1)


def test_seat_examples(rng):
    x = rng.standard_normal((4, 6))
    y = rng.standard_normal((5, 6))
    a = rng.standard_normal((3, 6))
    b = rng.standard_normal((3, 6))
    assert M.seat_effect_size(x, x, a, b) == 0.0
    d = M.seat_effect_size(x, y, a, b)
    assert M.seat_effect_size(x, y, b, a) == pytest.approx(-d)
    assert d == pytest.approx(brute_weat(x, y, a, b), abs=1e-12)
    scaled = x.copy()
    scaled[0] *= 17.0
    assert M.seat_effect_size(scaled, y, a, b) == pytest.approx(d, abs=1e-12)


def test_seat_hand_2d():
    # X on the A axis, Y on the B axis, A = e1, B = e2:
    # s(x) = 1 for x in X, s(y) = -1 for y in Y; sample std of [1,1,-1,-1] = 2/sqrt(3)
    e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    x = np.array([[2.0, 0.0], [0.5, 0.0]])
    y = np.array([[0.0, 3.0], [0.0, 1.0]])
    assert M.seat_effect_size(x, y, e1, e2) == pytest.approx(2 / (2 / math.sqrt(3)))


def test_seat_errors():
    with pytest.raises(ValueError):
        M.seat_effect_size(np.zeros((1, 2)), np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(M.UndefinedEffectSize):
        M.seat_effect_size(np.ones((2, 2)), np.ones((2, 2)), np.array([[1.0, 0]]), np.array([[0, 1.0]]))
    with pytest.raises(ValueError):
        M.seat_effect_size(np.ones((1, 2)), np.ones((1, 3)), np.ones((1, 2)), np.ones((1, 2)))


def test_seat_from_model(tiny_model, vocab):
    x = [["she", "likes", "the"], ["she", "wants", "the"]]
    assert M.seat_from_model(tiny_model, vocab, x, x, [["trait_f0"]], [["trait_m0"]]) == 0.0


def test_bootstrap_examples():
    const = M.bootstrap(np.full(30, 0.4))
    # only summation rounding separates the bounds
    assert const.ci_high - const.ci_low == pytest.approx(0.0, abs=1e-15)
    assert const.value == pytest.approx(0.4)
    r = M.bootstrap(np.random.default_rng(0).random(200), seed=3)
    assert r.ci_low <= r.boot_mean <= r.ci_high
    assert r == M.bootstrap(np.random.default_rng(0).random(200), seed=3)
    assert r.n == 200
    with pytest.raises(ValueError):
        M.bootstrap([])


def test_bootstrap_width_shrinks():
    rng = np.random.default_rng(5)
    small = M.bootstrap(rng.random(100))
    large = M.bootstrap(rng.random(10_000))
    assert large.ci_high - large.ci_low < small.ci_high - small.ci_low


def test_correlation_report_handles_degenerate_resamples():
    h = np.array([0.9, -0.9, 0.8, -0.7])
    lab = np.array([1.0, -1.0, 1.0, -1.0])
    r = M.correlation_report("cor", h, lab, resamples=200)
    assert r.value == pytest.approx(M.pearson(h, lab))
    assert r.ci_low <= r.boot_mean <= r.ci_high
