"""The gradient encoder-decoder with a single-neuron bottleneck.

``h = tanh(w_enc . g + b_enc)`` compresses a factual gradient ``g`` to one
scalar, and ``h * w_dec + b_dec`` maps it back to a predicted gradient
difference.  :class:`GradiendEstimator` wraps training and inference in the
scikit-learn transformer API so it composes with pipelines and model
selection utilities.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .corpus import Template
from .gradients import FlatIndexMap, GradientSample, batch_accumulate, build_flat_index, extract_batch
from .lm import ParamStore, Vocab
from .optim import Adam
from .stats import UndefinedCorrelation, pearson

log = logging.getLogger(__name__)


@dataclass
class Gradiend:
    w_enc: np.ndarray
    b_enc: float
    w_dec: np.ndarray
    b_dec: np.ndarray
    index: FlatIndexMap | None = None
    class_pair: tuple[str, str] = ("A", "B")
    sign_standardized: bool = False

    def __post_init__(self):
        n = self.w_enc.shape[0]
        if self.w_dec.shape != (n,) or self.b_dec.shape != (n,):
            raise T.ShapeError("w_enc, w_dec and b_dec must share one length n")
        if self.index is not None and self.index.n != n:
            raise T.ShapeError(f"index map covers {self.index.n} parameters, vectors have {n}")
        a, b = self.class_pair
        if not a < b:
            raise ValueError(f"class_pair must be ordered lexicographically, got {self.class_pair}")

    @property
    def n(self) -> int:
        return self.w_enc.shape[0]

    @property
    def n_params(self) -> int:
        return 3 * self.n + 1

    def copy(self) -> "Gradiend":
        return replace(self, w_enc=self.w_enc.copy(), w_dec=self.w_dec.copy(), b_dec=self.b_dec.copy())


def init_gradiend(n: int, seed: int, index: FlatIndexMap | None = None,
                  class_pair: tuple[str, str] = ("A", "B")) -> Gradiend:
    """Uniform(-1/sqrt(n), 1/sqrt(n)) for both weight vectors and the decoder bias.

    The decoder reuses the encoder's fan-in ``n`` instead of its own (1),
    which would give far too large initial outputs.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(n)

    def draw():
        v = rng.uniform(-bound, bound, size=n).astype(np.float32)
        # keep the open interval after rounding to float32
        return np.clip(v, np.nextafter(np.float32(-bound), np.float32(0)),
                       np.nextafter(np.float32(bound), np.float32(0)))

    return Gradiend(draw(), 0.0, draw(), draw(), index, class_pair)


def encode(g, model: Gradiend) -> float | np.ndarray:
    """Feature value(s) in (-1, 1) for one gradient vector or a (m, n) batch."""
    g = np.asarray(g)
    if g.shape[-1] != model.n:
        raise T.ShapeError(f"gradient length {g.shape[-1]} does not match n={model.n}")
    pre = g.astype(np.float64) @ model.w_enc.astype(np.float64) + float(model.b_enc)
    h = np.tanh(pre)
    return float(h) if g.ndim == 1 else h


def decode(h, model: Gradiend) -> np.ndarray:
    """``h * w_dec + b_dec`` for a scalar or a 1-D array of feature values."""
    h = np.asarray(h, dtype=np.float64)
    if not np.isfinite(h).all():
        raise ValueError("feature value must be finite")
    w, b = model.w_dec.astype(np.float64), model.b_dec.astype(np.float64)
    return h * w + b if h.ndim == 0 else h[:, None] * w[None, :] + b[None, :]


# ---------------------------------------------------------------- sample sources

class SampleSource(Protocol):
    classes: tuple[str, str]

    def draw(self, cls: str, rng: np.random.Generator) -> GradientSample: ...


class ArraySource:
    """Batch-averaged samples drawn from in-memory gradient arrays."""

    def __init__(self, factual: np.ndarray, diff: np.ndarray, labels: Sequence[str], batch_size: int = 32):
        self.factual = np.asarray(factual, dtype=np.float32)
        self.diff = np.asarray(diff, dtype=np.float32)
        self.labels = np.asarray(labels)
        self.classes = tuple(sorted(set(self.labels.tolist())))
        if len(self.classes) != 2:
            raise ValueError(f"need exactly two classes, got {self.classes}")
        self.batch_size = batch_size
        self._rows = {c: np.flatnonzero(self.labels == c) for c in self.classes}

    def draw(self, cls: str, rng: np.random.Generator) -> GradientSample:
        rows = rng.choice(self._rows[cls], size=min(self.batch_size, len(self._rows[cls])), replace=False)
        return batch_accumulate([GradientSample(cls, self.factual[i], self.factual[i] - self.diff[i], self.diff[i])
                                 for i in rows])


class TemplateSource:
    """Batch-averaged samples extracted on demand from instantiated templates.

    ``instances`` maps each of the two classes to its factual instances; the
    orthogonal target of an instance is taken from the other class.
    """

    def __init__(self, model: ParamStore, vocab: Vocab, instances: dict[str, Sequence[Template]],
                 batch_size: int = 32, index: FlatIndexMap | None = None):
        self.classes = tuple(sorted(instances))
        if len(self.classes) != 2 or not all(instances[c] for c in self.classes):
            raise ValueError("need non-empty instances for exactly two classes")
        self.model, self.vocab, self.instances = model, vocab, {c: list(v) for c, v in instances.items()}
        self.batch_size = batch_size
        self.index = index or build_flat_index(model)

    def draw(self, cls: str, rng: np.random.Generator) -> GradientSample:
        pool = self.instances[cls]
        rows = rng.choice(len(pool), size=min(self.batch_size, len(pool)), replace=False)
        other = self.classes[1] if cls == self.classes[0] else self.classes[0]
        return extract_batch(self.model, self.vocab, [pool[i] for i in rows], other, self.index)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-3            # large pretrained LMs want 1e-5 (1e-4 for the largest)
    weight_decay: float = 1e-2
    steps: int = 2000
    eval_every: int = 250
    grad_batch: int = 32
    gradiend_batch: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.eval_every > self.steps:
            raise ValueError("eval_every must not exceed steps")
        if self.gradiend_batch != 1:
            raise ValueError("only gradiend_batch == 1 is supported")


@dataclass
class TrainState:
    step: int = 0
    losses: list[float] = field(default_factory=list)
    evaluations: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = -1
    best_cor: float = float("nan")
    best: Gradiend | None = None
    aborted: bool = False


def _labels_pm(labels: Sequence[str], pair: tuple[str, str]) -> np.ndarray:
    lab = np.asarray(labels)
    if not set(lab.tolist()) <= set(pair):
        raise ValueError(f"labels outside class pair {pair}")
    return np.where(lab == pair[0], 1.0, -1.0)


def correlation(model: Gradiend, factual: np.ndarray, labels: Sequence[str]) -> float:
    """Pearson correlation of encoded values with +1 (first class) / -1 (second class)."""
    y = _labels_pm(labels, model.class_pair)
    try:
        return pearson(encode(np.atleast_2d(factual), model), y)
    except UndefinedCorrelation:
        return 0.0


def _step_loss(tape: T.Tape, p: dict[str, np.ndarray], x: np.ndarray, target: np.ndarray) -> T.Tensor:
    n = x.shape[0]
    w_enc = tape.watch("w_enc", p["w_enc"].reshape(n, 1))
    b_enc = tape.watch("b_enc", np.reshape(p["b_enc"], (1, 1)))
    w_dec = tape.watch("w_dec", p["w_dec"].reshape(1, n))
    b_dec = tape.watch("b_dec", p["b_dec"].reshape(1, n))
    h = T.tanh(T.add(T.matmul(x.reshape(1, n), w_enc), b_enc))
    pred = T.add(T.matmul(h, w_dec), b_dec)
    return T.mean_all(T.square(T.sub(pred, target.reshape(1, n))))


def train_gradiend(gradiend: Gradiend, source: SampleSource, val_factual: np.ndarray,
                   val_labels: Sequence[str], config: TrainConfig, seed: int = 0,
                   on_eval: Callable[[int, float], None] | None = None) -> tuple[Gradiend, TrainState]:
    """Fit ``dec(enc(factual)) ~ diff`` with Adam, one batch-averaged sample per step.

    Each step draws one of the two classes uniformly at random.  Every
    ``eval_every`` steps the validation correlation is computed and the best
    checkpoint is kept.  Orientation is arbitrary during training, so an
    evaluated snapshot with negative correlation is stored negated (same
    composite map, positive correlation).
    """
    if tuple(sorted(source.classes)) != tuple(gradiend.class_pair):
        raise ValueError(f"source classes {source.classes} do not match {gradiend.class_pair}")
    rng = np.random.default_rng(seed)
    p = {"w_enc": gradiend.w_enc.copy(), "b_enc": np.float32(gradiend.b_enc),
         "w_dec": gradiend.w_dec.copy(), "b_dec": gradiend.b_dec.copy()}
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay, decay_filter=lambda k: k.startswith("w_"))
    state = TrainState()

    def snapshot() -> Gradiend:
        return replace(gradiend, w_enc=p["w_enc"].copy(), b_enc=float(p["b_enc"]), w_dec=p["w_dec"].copy(),
                       b_dec=p["b_dec"].copy(), sign_standardized=False)

    last_good = snapshot()
    for step in range(1, config.steps + 1):
        cls = gradiend.class_pair[int(rng.integers(2))]
        sample = source.draw(cls, rng)
        tape = T.Tape()
        try:
            loss = _step_loss(tape, p, sample.grad_factual, sample.grad_diff)
            grads = tape.backward(loss)
        except T.NumericError:
            loss = None
        if loss is None or not math.isfinite(loss.item()):
            log.warning("non-finite GRADIEND loss at step %d; stopping", step)
            state.aborted = True
            if state.best is None:
                state.best = last_good
            break
        grads = {k: v.reshape(np.shape(p[k])) for k, v in grads.items()}
        opt.step(p, grads)
        p["b_enc"] = np.float32(p["b_enc"])
        state.step = step
        state.losses.append(loss.item())
        if step % config.eval_every == 0:
            current = snapshot()
            cor = correlation(current, val_factual, val_labels)
            if cor < 0:
                current, cor = _negated(current), -cor
            state.evaluations.append((step, cor))
            if on_eval:
                on_eval(step, cor)
            if state.best is None or cor > state.best_cor:
                state.best, state.best_cor, state.best_step = current, cor, step
            last_good = current
    if state.best is None:
        state.best = snapshot()
        state.best_cor = correlation(state.best, val_factual, val_labels)
    return state.best, state


def _negated(g: Gradiend) -> Gradiend:
    return replace(g, w_enc=-g.w_enc, b_enc=-g.b_enc, w_dec=-g.w_dec, b_dec=g.b_dec.copy())


def standardize_sign(gradiend: Gradiend, calibration_factual: np.ndarray, calibration_labels: Sequence[str]) -> Gradiend:
    """Orient the feature so the first class of ``class_pair`` encodes positive.

    If the mean feature over first-class samples is negative, ``w_enc``,
    ``b_enc`` and ``w_dec`` are negated together; ``dec(enc(g))`` is unchanged.
    """
    labels = np.asarray(calibration_labels)
    a, b = gradiend.class_pair
    if not ((labels == a).any() and (labels == b).any()):
        raise ValueError("calibration data must contain both classes")
    h = encode(np.atleast_2d(calibration_factual), gradiend)
    out = _negated(gradiend) if h[labels == a].mean() < 0 else gradiend.copy()
    out.sign_standardized = True
    return out


@dataclass
class MultiSeedResult:
    best: Gradiend
    best_seed: int
    scores: dict[int, float]
    states: dict[int, TrainState]


def multi_seed_train(n: int, source_for_seed: Callable[[int], SampleSource], val_factual: np.ndarray,
                     val_labels: Sequence[str], config: TrainConfig, index: FlatIndexMap | None = None,
                     class_pair: tuple[str, str] = ("A", "B"), k: int | None = None) -> MultiSeedResult:
    """Train ``k`` (default ``len(config.seeds)``, i.e. 3) independently seeded models; keep the best."""
    seeds = list(config.seeds if k is None else config.seeds[:k])
    if k is not None and len(seeds) < k:
        seeds += [max(seeds, default=-1) + 1 + i for i in range(k - len(seeds))]
    if not seeds:
        raise ValueError("need at least one seed")
    scores, states, models = {}, {}, {}
    for s in seeds:
        g0 = init_gradiend(n, s, index=index, class_pair=class_pair)
        model, state = train_gradiend(g0, source_for_seed(s), val_factual, val_labels, config, seed=s)
        scores[s], states[s], models[s] = state.best_cor, state, model
        log.info("seed %d: best |cor_T| %.4f at step %d", s, scores[s], state.best_step)
    finite = [s for s in seeds if math.isfinite(scores[s]) and not (states[s].aborted and states[s].best_step < 0)]
    if not finite:
        raise RuntimeError("all GRADIEND runs failed to produce a finite model")
    best_seed = max(finite, key=lambda s: (scores[s], -seeds.index(s)))
    return MultiSeedResult(models[best_seed], best_seed, scores, states)


# ---------------------------------------------------------------- estimator API

class GradiendEstimator(TransformerMixin, BaseEstimator):
    """scikit-learn style wrapper: ``fit`` learns the encoder-decoder,
    ``transform`` returns the feature neuron, ``inverse_transform`` decodes.

    ``fit(X, y, labels=...)`` takes factual gradients ``X`` (m, n), gradient
    differences ``y`` (m, n) and one class label per row.  Alternatively pass
    a :class:`SampleSource` as ``X`` together with validation data.
    """

    def __init__(self, learning_rate: float = 1e-3, weight_decay: float = 1e-2, steps: int = 2000,
                 eval_every: int = 250, grad_batch: int = 32, n_seeds: int = 3, random_state: int = 0,
                 standardize: bool = True):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.steps = steps
        self.eval_every = eval_every
        self.grad_batch = grad_batch
        self.n_seeds = n_seeds
        self.random_state = random_state
        self.standardize = standardize

    def _config(self) -> TrainConfig:
        seeds = tuple(self.random_state + i for i in range(self.n_seeds))
        return TrainConfig(lr=self.learning_rate, weight_decay=self.weight_decay, steps=self.steps,
                           eval_every=min(self.eval_every, self.steps), grad_batch=self.grad_batch, seeds=seeds)

    def fit(self, X, y=None, *, labels=None, X_val=None, labels_val=None, index: FlatIndexMap | None = None):
        if hasattr(X, "draw"):
            source_for_seed = lambda s: X  # noqa: E731
            if X_val is None or labels_val is None:
                raise ValueError("a sample source needs X_val and labels_val")
            pair = tuple(sorted(X.classes))
        else:
            X = check_array(X, dtype=np.float32)
            y = check_array(y, dtype=np.float32)
            if X.shape != y.shape:
                raise ValueError(f"X and y must have the same shape, got {X.shape} and {y.shape}")
            if labels is None or len(labels) != len(X):
                raise ValueError("labels must give one class per row of X")
            src = ArraySource(X, y, labels, batch_size=self.grad_batch)
            source_for_seed = lambda s: src  # noqa: E731
            pair = src.classes
            if X_val is None:
                X_val, labels_val = X, labels
        X_val = check_array(X_val, dtype=np.float32)
        n = X_val.shape[1]
        result = multi_seed_train(n, source_for_seed, X_val, labels_val, self._config(), index=index,
                                  class_pair=pair)
        model = result.best
        if self.standardize:
            model = standardize_sign(model, X_val, labels_val)
        self.gradiend_ = model
        self.seed_scores_ = result.scores
        self.best_seed_ = result.best_seed
        self.train_state_ = result.states[result.best_seed]
        self.classes_ = np.asarray(pair)
        self.n_features_in_ = n
        return self

    def transform(self, X):
        check_is_fitted(self, "gradiend_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return encode(X, self.gradiend_).reshape(-1, 1)

    def inverse_transform(self, H):
        check_is_fitted(self, "gradiend_")
        H = np.asarray(H, dtype=np.float64).reshape(-1)
        return decode(H, self.gradiend_)

    def predict(self, X):
        """Predicted gradient difference ``dec(enc(X))``."""
        return self.inverse_transform(self.transform(X))

    def score(self, X, labels):
        """Correlation of the feature with +1/-1 class labels."""
        check_is_fitted(self, "gradiend_")
        return correlation(self.gradiend_, check_array(X, dtype=np.float32), labels)
