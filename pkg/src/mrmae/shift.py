"""Distribution-shift analysis on yearly per-patch profiles.

Each patch of a layer yields one 12-dimensional point per complete year
(the monthly values). The largest covariance eigenvalue of those points is
the patch's variability; a non-maximum suppression over the 8-neighbourhood
keeps the locally most variable patches.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from mrmae.dataset import LayeredDataset
from mrmae.errors import DataError
from mrmae.masking import make_rng

log = logging.getLogger(__name__)


def jacobi_eigh(A, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue;
    eigenvectors are columns. Stops once the off-diagonal Frobenius norm is
    below ``tol`` times the matrix norm.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    m = A.shape[0]
    if A.shape != (m, m):
        raise DataError("jacobi_eigh needs a square matrix")
    V = np.eye(m)
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                with np.errstate(over="ignore"):
                    theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if not np.isfinite(theta):
                    continue  # apq negligible against the diagonal gap
                if abs(theta) > 1e100:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J on rows/cols p, q
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


def fix_sign(vec: np.ndarray) -> np.ndarray:
    """Flip so the largest-magnitude component is positive."""
    j = int(np.argmax(np.abs(vec)))
    return -vec if vec[j] < 0 else vec


@dataclass
class YearlyPointCloud:
    layer: str
    patch: tuple[int, int]
    years: list[int]
    points: np.ndarray  # (years, 12)
    dropped_years: list[int] = field(default_factory=list)


def build_yearly_points(series, timestamps, layer: str = "", patch=(0, 0)) -> YearlyPointCloud:
    """Group a monthly series into one 12-vector per complete calendar year.

    A year with any month absent or NaN is dropped (and logged).
    """
    series = np.asarray(series, dtype=np.float64)
    by_year: dict[int, dict[int, float]] = {}
    for (year, month), v in zip(timestamps, series):
        if not np.isnan(v):
            by_year.setdefault(int(year), {})[int(month)] = float(v)
    all_years = sorted({int(y) for y, _ in timestamps})
    years, points, dropped = [], [], []
    for y in all_years:
        months = by_year.get(y, {})
        if len(months) == 12 and set(months) == set(range(1, 13)):
            years.append(y)
            points.append([months[mo] for mo in range(1, 13)])
        else:
            dropped.append(y)
    if dropped:
        log.debug("layer %s patch %s: dropped incomplete years %s", layer, patch, dropped)
    if not years:
        raise DataError(f"layer {layer} patch {patch}: no complete year of data")
    return YearlyPointCloud(layer, tuple(patch), years, np.array(points), dropped)


def yearly_points_for(dataset: LayeredDataset, layer: str, row: int, col: int) -> YearlyPointCloud:
    j = dataset.feature_index(layer, row, col)
    return build_yearly_points(dataset.data[:, j], dataset.timestamps, layer, (row, col))


def pca_top(points):
    """Top-two principal components of the points (population covariance).

    Returns ``(lambda1, lambda2, projections)`` with ``projections`` of shape
    ``(len(points), 2)``, computed on the mean-centred points.
    """
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 2:
        raise DataError("pca_top needs at least two points")
    C = P - P.mean(axis=0)
    cov = C.T @ C / P.shape[0]
    vals, vecs = jacobi_eigh(cov)
    vals = np.maximum(vals, 0.0)
    lam2 = vals[1] if vals.size > 1 else 0.0
    u = fix_sign(vecs[:, 0])
    v = fix_sign(vecs[:, 1]) if vecs.shape[1] > 1 else np.zeros_like(u)
    proj = np.column_stack([C @ u, C @ v])
    return float(vals[0]), float(lam2), proj


def variability_map(dataset: LayeredDataset, layer: str) -> np.ndarray:
    """Largest eigenvalue per patch; NaN where fewer than two complete years exist."""
    spec = dataset.layer(layer)
    out = np.full((spec.rows, spec.cols), np.nan)
    for r in range(spec.rows):
        for c in range(spec.cols):
            try:
                cloud = yearly_points_for(dataset, layer, r, c)
            except DataError:
                continue
            if len(cloud.years) >= 2:
                out[r, c] = pca_top(cloud.points)[0]
    return out


def combined_variability(maps: dict[str, np.ndarray]) -> np.ndarray:
    """Element-wise max over layers sharing one patch grid (NaN ignored)."""
    stack = np.stack(list(maps.values()))
    with np.errstate(invalid="ignore"):
        all_nan = np.isnan(stack).all(axis=0)
        return np.where(all_nan, np.nan, np.nanmax(np.where(np.isnan(stack), -np.inf, stack), axis=0))


def select_patches(variability) -> set[tuple[int, int]]:
    """Keep patches that beat all 8 neighbours.

    Ordering is by value, ties going to the lexicographically smaller
    ``(row, col)``; undefined (NaN) patches are never kept and lose every
    comparison.
    """
    V = np.asarray(variability, dtype=np.float64)
    R, C = V.shape
    vals = np.where(np.isnan(V), -np.inf, V)
    padded = np.full((R + 2, C + 2), -np.inf)
    padded[1:-1, 1:-1] = vals
    rows, cols = np.meshgrid(np.arange(R), np.arange(C), indexing="ij")
    keep = ~np.isnan(V)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[1 + dr : R + 1 + dr, 1 + dc : C + 1 + dc]
            # the neighbour precedes us lexicographically iff it is above, or level and to the left
            nb_first = dr < 0 or (dr == 0 and dc < 0)
            keep &= (vals > nb) | ((vals == nb) & (not nb_first) & np.isfinite(nb))
    return {(int(r), int(c)) for r, c in zip(rows[keep], cols[keep])}


def ols_slope(y, x=None) -> float:
    y = np.asarray(y, dtype=np.float64)
    x = np.arange(y.size, dtype=np.float64) if x is None else np.asarray(x, dtype=np.float64)
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


def permutation_slope_test(y, n_perm: int = 10_000, seed: int = 0, alternative: str = "less") -> float:
    """p-value of the OLS slope against random reorderings of ``y``.

    ``alternative`` is ``"less"`` (slope < 0), ``"greater"`` or ``"two-sided"``.
    """
    y = np.asarray(y, dtype=np.float64)
    obs = ols_slope(y)
    rng = make_rng(seed)
    x = np.arange(y.size, dtype=np.float64)
    xc = x - x.mean()
    perms = np.array([rng.permutation(y) for _ in range(n_perm)])
    slopes = (perms - perms.mean(axis=1, keepdims=True)) @ xc / (xc * xc).sum()
    eps = 1e-12 * max(abs(obs), 1.0)
    if alternative == "less":
        hits = (slopes <= obs + eps).sum()
    elif alternative == "greater":
        hits = (slopes >= obs - eps).sum()
    else:
        hits = (np.abs(slopes) >= abs(obs) - eps).sum()
    return float((hits + 1) / (n_perm + 1))


@dataclass
class AccuracyTrend:
    accuracies: np.ndarray
    slope: float
    timestamps: list

    def p_value(self, n_perm: int = 10_000, seed: int = 0, alternative: str = "less") -> float:
        return permutation_slope_test(self.accuracies, n_perm, seed, alternative)


def accuracy_trend(predictor, X, output_index, timestamps=None) -> AccuracyTrend:
    """Per-observation accuracy on the output features, in the given (chronological) order.

    ``predictor`` follows the ``(X, unknown) -> Y_out`` convention of
    :mod:`mrmae.evaluate`; only the output features are hidden from it.
    """
    from mrmae.evaluate import row_accuracy

    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise DataError("accuracy trend needs at least two test observations")
    output_index = np.asarray(output_index)
    unknown = np.zeros(X.shape, dtype=bool)
    unknown[:, output_index] = True
    unknown |= np.isnan(X)
    pred = predictor(np.where(np.isnan(X), 0.0, X), unknown)
    acc = row_accuracy(X[:, output_index], pred)
    return AccuracyTrend(acc, ols_slope(acc), list(timestamps or []))


def write_selected(path, selected: dict[str, set], maps: dict[str, np.ndarray]) -> None:
    """``layer,row,col,lambda1`` for every selected patch, sorted."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "row", "col", "lambda1"])
        for layer in sorted(selected):
            for r, c in sorted(selected[layer]):
                w.writerow([layer, r, c, repr(float(maps[layer][r, c]))])
    os.replace(tmp, path)


def write_projection(path, cloud: YearlyPointCloud) -> None:
    """``year,u,v`` rows: the patch's yearly points on its first two components."""
    _, _, proj = pca_top(cloud.points)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "u", "v"])
        for y, (u, v) in zip(cloud.years, proj):
            w.writerow([y, repr(float(u)), repr(float(v))])
    os.replace(tmp, path)
