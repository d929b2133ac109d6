import numpy as np
import pytest

from gradiend import corpus as C
from gradiend.lm import ModelConfig, build_model


@pytest.fixture(scope="session")
def lexicon():
    return C.make_lexicon(seed=3)


@pytest.fixture(scope="session")
def vocab(lexicon):
    return lexicon.vocab()


@pytest.fixture
def tiny_model():
    # untrained, small enough for exhaustive finite differences on pieces of it
    return build_model(ModelConfig(vocab_size=200, max_seq_len=16, embed_dim=8, num_heads=2, ffn_mult=2, seed=1))


@pytest.fixture
def tiny_prefix_model():
    return build_model(ModelConfig(vocab_size=200, max_seq_len=16, embed_dim=8, num_heads=2, ffn_mult=2,
                                   mode="prefix-only", seed=2))


@pytest.fixture(scope="session")
def templates(lexicon):
    return C.gen_templates(40, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_run_config(tmp_path):
    """Pair feature with minimal sizes: every stage runs in about a second."""
    return {"out": str(tmp_path / "run"),
            "corpus": {"feature": "ava/bel", "lm_corpus_size": 400, "pair_texts": 200, "n_neutral_lms": 30,
                       "n_neutral_eval": 20, "n_probes": 10, "n_stereo_probes": 10},
            "model": {"embed_dim": 8, "ffn_mult": 2, "steps": 30},
            "gradiend": {"steps": 20, "eval_every": 10, "n_seeds": 2, "grad_batch": 4, "n_val_per_class": 6,
                         "n_test_per_class": 8, "n_neutral": 8},
            "sweep": {"feature_factors": [0.0, 1.0, -1.0], "learning_rates": [0.1, -0.1]},
            "metrics": {"resamples": 50}}


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then assert it."""
    def check(number: int, ok: bool, detail: str):
        request.config.stash.setdefault(_ACCEPTANCE, {})[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"
    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
