"""Accuracy metric and the input-masking sweep harness.

A *predictor* here is any callable ``predictor(X, unknown) -> Y_out`` where
``X`` is a ``(B, n)`` batch of normalized observations, ``unknown`` a
``(B, n)`` boolean array of features the predictor may not look at (masked
inputs plus the task outputs), and ``Y_out`` the ``(B, len(output_index))``
predictions for the task's output features.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from mrmae.errors import ConfigError, DataError
from mrmae.ensemble import EnsembleConfig, ensemble_predict_batch
from mrmae.masking import make_rng, target_size
from mrmae.nnet import MlpModel, forward


def accuracy(truth, pred, scope=None) -> float:
    """``100 * (1 - mean |pred - truth|)`` over the features in ``scope``.

    Works on vectors or row batches (the mean then runs over rows too).
    Not clipped: very poor predictions score below zero.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if scope is not None:
        scope = np.asarray(scope)
        if scope.size == 0:
            raise DataError("accuracy scope is empty")
        truth, pred = truth[..., scope], pred[..., scope]
    if truth.size == 0:
        raise DataError("accuracy scope is empty")
    return float(100.0 * (1.0 - np.abs(pred - truth).mean()))


def row_accuracy(truth, pred) -> np.ndarray:
    """Per-row accuracy of aligned ``(B, m)`` arrays."""
    return 100.0 * (1.0 - np.abs(np.asarray(pred) - np.asarray(truth)).mean(axis=1))


def mean_baseline_accuracy(truth, means) -> float:
    """Accuracy of always predicting the feature means; logged next to model scores."""
    truth = np.asarray(truth, dtype=np.float64)
    return accuracy(truth, np.broadcast_to(means, truth.shape))


class MAEPredictor:
    def __init__(self, model: MlpModel, means, output_index):
        self.model = model
        self.means = np.asarray(getattr(means, "means", means), dtype=np.float64)
        self.output_index = np.asarray(output_index)

    def __call__(self, X, unknown):
        return forward(self.model, np.where(unknown, self.means, X))[:, self.output_index]


class EnsemblePredictor:
    def __init__(self, model: MlpModel, means, output_index, cfg: EnsembleConfig):
        self.model = model
        self.means = np.asarray(getattr(means, "means", means), dtype=np.float64)
        self.output_index = np.asarray(output_index)
        self.cfg = cfg

    def __call__(self, X, unknown):
        F = np.where(unknown, self.means, X)
        return ensemble_predict_batch(self.model, F, unknown, self.means, self.cfg)[:, self.output_index]


class TaskPredictor:
    """Wraps a fixed input->output model; masked inputs are mean-imputed."""

    def __init__(self, fn, means, input_index, output_index):
        self.fn = fn
        self.means = np.asarray(getattr(means, "means", means), dtype=np.float64)
        self.input_index = np.asarray(input_index)
        self.output_index = np.asarray(output_index)

    def __call__(self, X, unknown):
        F = np.where(unknown, self.means, X)
        return np.asarray(self.fn(F[:, self.input_index]))


class ConstantPredictor:
    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def __call__(self, X, unknown):
        return np.broadcast_to(self.values, (X.shape[0], self.values.size)).copy()


@dataclass
class SweepConfig:
    fractions: tuple = tuple(np.round(np.arange(0.0, 0.951, 0.05), 2))
    trials: int = 50
    seed: int = 0

    def __post_init__(self):
        fr = np.asarray(self.fractions, dtype=np.float64)
        if fr.size == 0 or (fr < 0).any() or (fr > 0.95).any():
            raise ConfigError("sweep fractions must lie in [0, 0.95]")
        if (np.diff(fr) <= 0).any():
            raise ConfigError("sweep fractions must be strictly increasing")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        self.fractions = tuple(float(f) for f in fr)


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)

    def curve(self, model: str) -> tuple[np.ndarray, np.ndarray]:
        sel = [r for r in self.rows if r["model"] == model]
        return np.array([r["fraction"] for r in sel]), np.array([r["mean_acc"] for r in sel])

    def trials(self, model: str, fraction: float) -> np.ndarray:
        for r in self.rows:
            if r["model"] == model and np.isclose(r["fraction"], fraction):
                return np.asarray(r["per_trial"])
        raise KeyError((model, fraction))

    def to_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "fraction", "mean_acc", "std_acc", "trials"])
            for r in self.rows:
                w.writerow([r["model"], repr(r["fraction"]), repr(r["mean_acc"]), repr(r["std_acc"]), r["trials"]])
        os.replace(tmp, path)


def sweep_input_mask(rng, B: int, n: int, input_index, frac: float) -> np.ndarray:
    """Mask ``round(frac * |inputs|)`` input features per row, uniformly."""
    input_index = np.asarray(input_index)
    size = min(target_size(frac, input_index.size), input_index.size - 1) if input_index.size > 1 else 0
    keys = rng.random((B, input_index.size))
    ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
    out = np.zeros((B, n), dtype=bool)
    out[:, input_index] = ranks < size
    return out


def masking_sweep(cfg: SweepConfig, X, input_index, output_index, predictors: dict) -> SweepResult:
    """Accuracy of every predictor on the output features as inputs are masked.

    For each fraction and trial one random input mask per row is drawn from
    ``(seed, fraction index, trial)``; every predictor sees the same masks.
    Output features are always unknown and never part of the input mask.
    """
    X = np.asarray(X, dtype=np.float64)
    B, n = X.shape
    output_index = np.asarray(output_index)
    out_flags = np.zeros(n, dtype=bool)
    out_flags[output_index] = True
    truth = X[:, output_index]
    scored = ~np.isnan(truth)
    result = SweepResult()
    per = {name: np.empty((len(cfg.fractions), cfg.trials)) for name in predictors}
    for fi, frac in enumerate(cfg.fractions):
        for t in range(cfg.trials):
            rng = make_rng((cfg.seed, fi, t))
            unknown = sweep_input_mask(rng, B, n, input_index, frac) | out_flags | np.isnan(X)
            Xf = np.where(np.isnan(X), 0.0, X)
            for name, pred in predictors.items():
                P = pred(Xf, unknown)
                per[name][fi, t] = float(100.0 * (1.0 - np.abs(P - truth)[scored].mean()))
    for name in predictors:
        for fi, frac in enumerate(cfg.fractions):
            vals = per[name][fi]
            result.rows.append(
                {
                    "model": name,
                    "fraction": frac,
                    "mean_acc": float(vals.mean()),
                    "std_acc": float(vals.std()),
                    "trials": cfg.trials,
                    "per_trial": vals.tolist(),
                }
            )
    return result
