"""Loss Matrix feature importance.

Cell ``(a, b)`` accumulates the loss on feature ``b`` over every prediction
in which ``b`` was masked and ``a`` was visible. Low average loss in row ``a``
means feature ``a`` helps; the summaries negate and rescale to ``[0, 1]``.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mrmae.dataset import LayeredDataset, compute_feature_means, write_grid
from mrmae.errors import DataError
from mrmae.masking import MaskPolicy, make_rng, sample_mask_matrix
from mrmae.nnet import MlpModel, forward
from mrmae.training import feature_losses


@dataclass
class LossMatrix:
    sums: np.ndarray
    counts: np.ndarray
    layer_partition: dict | None = None

    @classmethod
    def zeros(cls, n: int, layer_partition=None) -> "LossMatrix":
        return cls(np.zeros((n, n)), np.zeros((n, n), dtype=np.int64), layer_partition)

    @property
    def n(self) -> int:
        return self.sums.shape[0]

    def averages(self) -> np.ndarray:
        """Cell means, NaN where a cell was never updated."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)

    def update(self, masks: np.ndarray, losses: np.ndarray, observed=None) -> None:
        """Fold in a batch: ``masks`` (B, n) bool, ``losses`` (B, n) per-feature losses.

        ``observed`` (B, n) bool marks entries with ground truth; an unobserved
        feature is neither visible nor scored.
        """
        masks = np.asarray(masks, dtype=bool)
        obs = np.ones_like(masks) if observed is None else np.asarray(observed, dtype=bool)
        visible = (~masks & obs).astype(np.float64)
        scored = (masks & obs).astype(np.float64)
        self.sums += visible.T @ (scored * np.where(obs, losses, 0.0))
        self.counts += (visible.T @ scored).round().astype(np.int64)

    def merge(self, other: "LossMatrix") -> "LossMatrix":
        return LossMatrix(self.sums + other.sums, self.counts + other.counts, self.layer_partition)

    def save(self, path) -> None:
        """``u64 n``, then sums (f64) and counts (i64), little-endian row-major."""
        blob = (
            struct.pack("<Q", self.n)
            + np.ascontiguousarray(self.sums, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.counts, dtype="<i8").tobytes()
        )
        tmp = f"{path}.tmp"
        Path(tmp).write_bytes(blob)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "LossMatrix":
        blob = Path(path).read_bytes()
        (n,) = struct.unpack_from("<Q", blob, 0)
        sums = np.frombuffer(blob, dtype="<f8", count=n * n, offset=8).reshape(n, n).copy()
        counts = np.frombuffer(blob, dtype="<i8", count=n * n, offset=8 + 8 * n * n).reshape(n, n).copy()
        return cls(sums, counts)


def accumulate_loss_matrix(
    model: MlpModel,
    dataset: LayeredDataset,
    policy: MaskPolicy,
    iterations: int,
    seed: int | None = None,
    base: str = "l1",
    rows=None,
) -> LossMatrix:
    """Run ``iterations`` passes over the observations, one fresh mask each.

    ``rows`` selects observations (default: the training split). Missing
    ground truth (NaN) is never scored.
    """
    means = compute_feature_means(dataset).means
    X = dataset.train if rows is None else dataset.data[rows]
    n = dataset.n
    rng = policy.rng() if seed is None else make_rng(seed)
    lm = LossMatrix.zeros(n, dataset.layer_partition)
    missing = np.isnan(X)
    Xf = np.where(missing, means, X)
    for _ in range(iterations):
        M = sample_mask_matrix(policy, n, dataset.layer_partition, rng, X.shape[0])
        P = forward(model, np.where(M | missing, means, Xf))
        lm.update(M, feature_losses(Xf, P, base), ~missing)
    return lm


@dataclass
class ImportanceReport:
    mode: str
    target: object
    average_loss: np.ndarray
    importance: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.importance)

    def to_csv(self, path, feature_coords) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature_index", "layer", "patch_row", "patch_col", "importance"])
            for j, ((layer, r, c), v) in enumerate(zip(feature_coords, self.importance)):
                w.writerow([j, layer, r, c, "" if np.isnan(v) else repr(float(v))])
        os.replace(tmp, path)


def minmax_importance(avg_loss: np.ndarray) -> np.ndarray:
    """Negate and rescale defined entries to [0, 1]; a constant vector maps to 0."""
    out = np.full(avg_loss.shape, np.nan)
    ok = ~np.isnan(avg_loss)
    if not ok.any():
        return out
    score = -avg_loss[ok]
    lo, hi = score.min(), score.max()
    out[ok] = 0.0 if hi == lo else (score - lo) / (hi - lo)
    return out


def _row_mean_defined(avg: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(avg)
    cnt = ok.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, np.where(ok, avg, 0.0).sum(axis=1) / np.maximum(cnt, 1), np.nan)


def summarize(matrix: LossMatrix, mode: str = "global", target=None) -> ImportanceReport:
    """Feature-wise (``target`` = feature index), layer-wise (``target`` = layer name
    or ``(start, stop)``) or global importance."""
    avg = matrix.averages()
    if mode == "feature":
        t = int(target)
        raw = avg[:, t]
        if np.isnan(raw).all():
            raise DataError(f"feature {t} never masked under this policy")
    elif mode == "layer":
        if isinstance(target, str):
            if not matrix.layer_partition or target not in matrix.layer_partition:
                raise DataError(f"unknown layer {target!r}")
            a, b = matrix.layer_partition[target]
        else:
            a, b = target
        raw = _row_mean_defined(avg[:, a:b])
        if np.isnan(raw).all():
            raise DataError(f"layer {target} never masked under this policy")
    elif mode == "global":
        raw = _row_mean_defined(avg)
        if np.isnan(raw).all():
            raise DataError("loss matrix has no defined cells")
    else:
        raise DataError(f"unknown importance mode {mode!r}")
    return ImportanceReport(mode, target, raw, minmax_importance(raw))


def importance_to_map(report: ImportanceReport, dataset: LayeredDataset) -> dict[str, np.ndarray]:
    """Per-layer patch grids of importance (NaN where undefined)."""
    return {name: dataset.layer_grid(report.importance, name) for name in dataset.layer_names}


def write_importance_maps(maps: dict[str, np.ndarray], out_dir, prefix: str = "importance") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name, grid in maps.items():
        path = out_dir / f"{prefix}_{name}.f32"
        write_grid(path, grid)
        paths.append(path)
    return paths
