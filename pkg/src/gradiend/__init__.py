"""Gradient encoder-decoder feature neurons on a from-scratch toy language model."""
from .core import (ArraySource, Gradiend, GradiendEstimator, TemplateSource, TrainConfig, TrainState, decode,
                   encode, init_gradiend, multi_seed_train, standardize_sign, train_gradiend)
from .io import IntegrityError, load_container, save_container
from .pipeline import RunConfig, run_pipeline
from .rewrite import SweepCell, SweepGrid, point_symmetry_residual, rewrite, select, sweep

__version__ = "0.1.0"

__all__ = ["ArraySource", "Gradiend", "GradiendEstimator", "TemplateSource", "TrainConfig", "TrainState", "decode",
           "encode", "init_gradiend", "multi_seed_train", "standardize_sign", "train_gradiend", "IntegrityError",
           "load_container", "save_container", "RunConfig", "run_pipeline", "SweepCell", "SweepGrid",
           "point_symmetry_residual", "rewrite", "select", "sweep"]
