"""Pseudo-label self-training.

A teacher autoencoder, run as a masking ensemble, fills in the unknown
features of unlabeled observations. Those completed rows are appended to
the training rows and a student is trained on the union.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from mrmae.baselines import (
    TaskMLP,
    TaskMLPConfig,
    TaskSpec,
    fit_linear_matrix,
    fit_mlp_matrix,
    solve_hidden_width,
)
from mrmae.dataset import LayeredDataset, compute_feature_means
from mrmae.ensemble import EnsembleConfig, ensemble_predict_batch
from mrmae.errors import ConfigError, DataError
from mrmae.nnet import MlpModel
from mrmae.training import TrainConfig, train_on_matrix

STUDENT_KINDS = ("mae", "mlp", "linear", "lasso")


def generate_pseudo_labels(teacher: MlpModel, X_unlabeled, unknown, cfg: EnsembleConfig, means) -> np.ndarray:
    """Fill the ``unknown`` entries of each row with the teacher ensemble's prediction.

    Known entries are copied through unchanged. ``unknown`` is a ``(B, n)``
    boolean array (or broadcastable); NaN entries are always treated as unknown.
    """
    X = np.asarray(X_unlabeled, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("unlabeled observations must be a 2-D array")
    means = np.asarray(getattr(means, "means", means), dtype=np.float64)
    unknown = np.broadcast_to(np.asarray(unknown, dtype=bool), X.shape) | np.isnan(X)
    out = np.where(unknown, means, X)
    todo = unknown.any(axis=1)
    if todo.any():
        pred = ensemble_predict_batch(teacher, out[todo], unknown[todo], means, cfg)
        out[todo] = np.where(unknown[todo], pred, out[todo])
    return out


@dataclass
class PseudoLabeledDataset:
    base: LayeredDataset
    pseudo_rows: np.ndarray
    observed: np.ndarray  # (r, n) bool, False where the value is a pseudo-label
    pseudo_weight: float = 1.0
    construction_log: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pseudo_rows = np.asarray(self.pseudo_rows, dtype=np.float64).reshape(-1, self.base.n)
        self.observed = np.asarray(self.observed, dtype=bool).reshape(self.pseudo_rows.shape)
        if not self.construction_log:
            self.construction_log = self.audit()

    @property
    def train_rows(self) -> np.ndarray:
        return self.base.train

    @property
    def combined(self) -> np.ndarray:
        return np.vstack([self.train_rows, self.pseudo_rows])

    @property
    def row_weights(self) -> np.ndarray:
        return np.concatenate([np.ones(self.train_rows.shape[0]), np.full(self.pseudo_rows.shape[0], self.pseudo_weight)])

    @property
    def row_groups(self) -> np.ndarray:
        return np.array(["observed"] * self.train_rows.shape[0] + ["pseudo"] * self.pseudo_rows.shape[0])

    def audit(self) -> dict:
        """Recount value provenance over the appended rows."""
        return {
            "train_rows": int(self.train_rows.shape[0]),
            "pseudo_rows": int(self.pseudo_rows.shape[0]),
            "observed_values": int(self.observed.sum()),
            "pseudo_values": int((~self.observed).sum()),
        }

    def write(self, out_dir, timestamps=None) -> None:
        """``dataset.csv`` (long format, every row) and ``provenance.csv``."""
        from mrmae.dataset import export_csv

        os.makedirs(out_dir, exist_ok=True)
        stamps = list(self.base.timestamps[i] for i in np.flatnonzero(self.base.is_train))
        stamps += list(timestamps) if timestamps is not None else [(0, 0)] * self.pseudo_rows.shape[0]
        combined = LayeredDataset(
            self.combined, self.base.layers, tuple(stamps), np.ones(len(stamps), dtype=bool), self.base.norm_stats
        )
        export_csv(combined, os.path.join(out_dir, "dataset.csv"))
        path = os.path.join(out_dir, "provenance.csv")
        tmp = path + ".tmp"
        coords = self.base.feature_coords
        n_train = self.train_rows.shape[0]
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "timestamp", "layer", "patch_row", "patch_col", "provenance"])
            for i in range(self.pseudo_rows.shape[0]):
                y, m = stamps[n_train + i]
                for j, (layer, r, c) in enumerate(coords):
                    w.writerow([n_train + i, f"{y:04d}-{m:02d}", layer, r, c, "observed" if self.observed[i, j] else "pseudo"])
        os.replace(tmp, path)


def build_pseudo_dataset(
    base: LayeredDataset, teacher: MlpModel, X_unlabeled, unknown, cfg: EnsembleConfig, pseudo_weight: float = 1.0
) -> PseudoLabeledDataset:
    means = compute_feature_means(base)
    X = np.asarray(X_unlabeled, dtype=np.float64).reshape(-1, base.n)
    unk = np.broadcast_to(np.asarray(unknown, dtype=bool), X.shape) | np.isnan(X)
    rows = generate_pseudo_labels(teacher, X, unk, cfg, means) if X.shape[0] else X
    pl = PseudoLabeledDataset(base, rows, ~unk, pseudo_weight)
    return pl


@dataclass
class StudentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    mlp: TaskMLPConfig = field(default_factory=TaskMLPConfig)
    param_budget: int | None = None
    l1_penalty: float = 1e-2


def train_student(combined: PseudoLabeledDataset, kind: str, task: TaskSpec | None = None, cfg: StudentConfig = StudentConfig()):
    """Train a student on training rows plus pseudo rows, pseudo-labels taken as truth.

    ``mae`` students are task-blind and return ``(model, TrainLog)`` whose
    records carry ``loss_observed`` / ``loss_pseudo``. Task students need
    ``task`` and return a fitted model (``TaskMLP`` or ``LinearModel``).
    """
    if kind not in STUDENT_KINDS:
        raise ConfigError(f"unknown student kind {kind!r}")
    base = combined.base
    X = combined.combined
    w = combined.row_weights
    if kind == "mae":
        means = compute_feature_means(base)
        groups = combined.row_groups if combined.pseudo_rows.shape[0] else None
        return train_on_matrix(X, means, base.layer_partition, cfg.train, sample_weight=w if combined.pseudo_weight != 1.0 else None, groups=groups)
    if task is None:
        raise ConfigError(f"{kind} student needs a task")
    in_idx, out_idx = task.input_index(base), task.output_index(base)
    ok = ~np.isnan(X[:, in_idx]).any(axis=1) & ~np.isnan(X[:, out_idx]).any(axis=1)
    Xi, Yo, w = X[ok][:, in_idx], X[ok][:, out_idx], w[ok]
    sw = None if np.all(w == 1.0) else w
    if kind == "mlp":
        if cfg.param_budget is None:
            raise ConfigError("mlp student needs param_budget")
        width = solve_hidden_width(in_idx.size, out_idx.size, cfg.param_budget)
        model, hist = fit_mlp_matrix(Xi, Yo, [width, width], cfg.mlp, sample_weight=sw)
        return TaskMLP(model, in_idx, out_idx, hist)
    penalty = 0.0 if kind == "linear" else cfg.l1_penalty
    return fit_linear_matrix(Xi, Yo, penalty, sample_weight=sw)
