"""Weight rewriting with the decoder, the (h, alpha) sweep and model selection."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .core import Gradiend, decode
from .lm import ParamStore
from .metrics import ClassTargets, probe_probabilities, selection_scores

log = logging.getLogger(__name__)

# Inferred grids: every (h, alpha) of the published selected-model tables lies on them.
DEFAULT_FEATURE_FACTORS = (0.0, 0.2, -0.2, 0.4, -0.4, 0.6, -0.6, 0.8, -0.8, 1.0, -1.0, 2.0, -2.0, 10.0, -10.0)
DEFAULT_LEARNING_RATES = (5e-4, -5e-4, 1e-3, -1e-3, 5e-3, -5e-3, 1e-2, -1e-2, 5e-2, -5e-2, 1e-1, -1e-1,
                          5e-1, -5e-1, 1.0, -1.0)
CRITERIA = ("bpi", "fpi", "mpi")


def rewrite(model: ParamStore, gradiend: Gradiend, h: float, alpha: float) -> ParamStore:
    """Copy of ``model`` with body parameters ``W + alpha * dec(h)``; the head is untouched."""
    if gradiend.index is None:
        raise ValueError("gradiend has no index map")
    gradiend.index.check(model)
    out = model.copy()
    if alpha == 0:
        return out
    update = gradiend.index.unflatten(alpha * decode(h, gradiend))
    for name, delta in update.items():
        out[name] = (model[name].astype(np.float64) + delta).astype(model[name].dtype)
    return out


def point_symmetry_residual(model: ParamStore, gradiend: Gradiend, h: float, alpha: float) -> float:
    """max |[rewrite(h, a) - rewrite(-h, -a)] - 2 a b_dec| over body coordinates."""
    idx = gradiend.index
    plus = idx.flatten(rewrite(model, gradiend, h, alpha).as_dict()).astype(np.float64)
    minus = idx.flatten(rewrite(model, gradiend, -h, -alpha).as_dict()).astype(np.float64)
    return float(np.max(np.abs(plus - minus - 2.0 * alpha * gradiend.b_dec.astype(np.float64)), initial=0.0))


@dataclass(frozen=True)
class SweepGrid:
    feature_factors: tuple[float, ...] = DEFAULT_FEATURE_FACTORS
    learning_rates: tuple[float, ...] = DEFAULT_LEARNING_RATES
    include_base_cell: bool = True

    def __post_init__(self):
        for axis in (self.feature_factors, self.learning_rates):
            if sorted(axis) != sorted(-v for v in axis):
                raise ValueError("grid axes must be symmetric about 0")
            if len(set(axis)) != len(axis):
                raise ValueError("grid axes must not repeat values")

    def cells(self) -> list[tuple[float, float]]:
        """Base cell first, then row-major over (feature factor, learning rate)."""
        out = [(0.0, 0.0)] if self.include_base_cell else []
        return out + [(h, a) for h in self.feature_factors for a in self.learning_rates]


@dataclass
class SweepCell:
    h: float
    alpha: float
    p_a: float = float("nan")
    p_b: float = float("nan")
    p_union: float = float("nan")
    lms: float = float("nan")
    bpi: float = float("nan")
    fpi: float = float("nan")
    mpi: float = float("nan")
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class SweepInputs:
    """What every cell is evaluated on."""
    probe_items: Sequence[tuple[Sequence[int], int]]
    targets: ClassTargets
    lms_fn: Callable[[ParamStore], float]


def evaluate_cell(model: ParamStore, h: float, alpha: float, inputs: SweepInputs) -> SweepCell:
    res = probe_probabilities(model, inputs.probe_items, inputs.targets)
    lms = inputs.lms_fn(model)
    bpi, fpi, mpi = selection_scores(res, lms)
    return SweepCell(h, alpha, float(res.p_a.mean()), float(res.p_b.mean()), float(res.p_union.mean()),
                     float(lms), bpi, fpi, mpi)


def sweep(model: ParamStore, gradiend: Gradiend, grid: SweepGrid, probe_items, targets: ClassTargets,
          lms_fn: Callable[[ParamStore], float]) -> list[SweepCell]:
    """Rewrite a pristine copy of ``model`` for every grid cell and score it.

    A cell that fails (for example a rewrite that overflows to non-finite
    weights) is kept with NaN metrics and the cause in ``status``.
    """
    if not probe_items:
        raise ValueError("no probe items")
    gradiend.index.check(model)
    inputs = SweepInputs(probe_items, targets, lms_fn)
    out = []
    for h, alpha in grid.cells():
        try:
            out.append(evaluate_cell(rewrite(model, gradiend, h, alpha), h, alpha, inputs))
        except (T.NumericError, FloatingPointError, ValueError) as exc:
            log.info("sweep cell h=%g alpha=%g failed: %s", h, alpha, exc)
            out.append(SweepCell(h, alpha, status=f"failed: {type(exc).__name__}: {exc}"))
    return out


def select(cells: Sequence[SweepCell], criterion: str) -> SweepCell:
    """Best cell by ``criterion``; ties go to smaller |alpha|, then smaller |h|."""
    criterion = criterion.lower()
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    good = [c for c in cells if c.ok and math.isfinite(getattr(c, criterion))]
    if not good:
        raise ValueError("no successfully evaluated cell to select from")
    return min(good, key=lambda c: (-getattr(c, criterion), abs(c.alpha), abs(c.h)))
