"""Gridded multi-layer observations reduced to flat per-patch feature vectors.

A dataset holds ``k`` observations (one per timestamp) of ``n`` features.
Features are grouped by layer in manifest order; inside a layer the patches
are laid out row-major, so feature ``j`` of layer ``L`` with a ``R x C``
patch grid sits at ``(j // C, j % C)``.

Missing cells are NaN throughout: in grid files (quiet NaN, 0x7FC00000), in
patch averages (an all-missing patch) and in the feature matrix.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mrmae.errors import ConfigError, DataError

log = logging.getLogger(__name__)

GRID_DTYPE = np.dtype("<f4")
DEFAULT_PATTERN = "{layer}_{year}_{month}.f32"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    rows: int
    cols: int


@dataclass(frozen=True)
class LayerManifest:
    layers: tuple[LayerSpec, ...]
    patch_size: int
    timestamps: tuple[tuple[int, int], ...]
    grid_file_pattern: str = DEFAULT_PATTERN

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("manifest needs at least one layer")
        if not self.timestamps:
            raise ConfigError("manifest needs at least one timestamp")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in manifest: {names}")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        for layer in self.layers:
            if layer.rows % self.patch_size or layer.cols % self.patch_size:
                raise ConfigError(
                    f"layer {layer.name}: {layer.rows}x{layer.cols} grid is not "
                    f"divisible by patch_size {self.patch_size}"
                )

    @classmethod
    def from_dict(cls, doc: dict) -> "LayerManifest":
        try:
            layers = tuple(
                LayerSpec(str(d["name"]), int(d["rows"]), int(d["cols"])) for d in doc["layers"]
            )
            timestamps = tuple((int(y), int(m)) for y, m in doc["timestamps"])
            patch_size = int(doc["patch_size"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed manifest: {exc!r}") from exc
        pattern = doc.get("grid_file_pattern", DEFAULT_PATTERN)
        return cls(layers, patch_size, timestamps, pattern)

    def to_dict(self) -> dict:
        return {
            "layers": [{"name": s.name, "rows": s.rows, "cols": s.cols} for s in self.layers],
            "patch_size": self.patch_size,
            "timestamps": [[y, m] for y, m in self.timestamps],
            "grid_file_pattern": self.grid_file_pattern,
        }

    def grid_filename(self, layer: str, year: int, month: int) -> str:
        return self.grid_file_pattern.format(layer=layer, year=year, month=month)


def load_manifest(path) -> LayerManifest:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    return LayerManifest.from_dict(doc)


def read_grid(path, rows: int, cols: int) -> np.ndarray:
    raw = np.fromfile(path, dtype=GRID_DTYPE)
    if raw.size != rows * cols:
        raise DataError(f"grid file {path} holds {raw.size} values, expected {rows}x{cols}")
    return raw.reshape(rows, cols).astype(np.float64)


def write_grid(path, grid: np.ndarray) -> None:
    arr = np.asarray(grid, dtype=GRID_DTYPE)
    # canonical quiet NaN so files are byte-stable
    arr = np.where(np.isnan(arr), np.float32("nan"), arr).astype(GRID_DTYPE)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(arr.tobytes(order="C"))
    os.replace(tmp, path)


@dataclass
class GridStack:
    """Raw pixel grids: ``grids[layer]`` has shape ``(T, rows, cols)``."""

    manifest: LayerManifest
    grids: dict[str, np.ndarray]
    missing_files: list[str] = field(default_factory=list)


def load_grids(manifest_path, grids_dir=None) -> GridStack:
    """Read every (layer, timestamp) grid named by the manifest.

    Absent files become all-NaN grids and are listed in ``missing_files``.
    """
    manifest = load_manifest(manifest_path)
    grids_dir = Path(grids_dir) if grids_dir is not None else Path(manifest_path).parent
    grids, missing = {}, []
    for spec in manifest.layers:
        stack = np.full((len(manifest.timestamps), spec.rows, spec.cols), np.nan)
        for t, (year, month) in enumerate(manifest.timestamps):
            path = grids_dir / manifest.grid_filename(spec.name, year, month)
            if not path.exists():
                missing.append(str(path))
                continue
            stack[t] = read_grid(path, spec.rows, spec.cols)
        grids[spec.name] = stack
    if missing:
        log.info("%d grid files absent, recorded as fully missing", len(missing))
    return GridStack(manifest, grids, missing)


def patch_average(grid: np.ndarray, patch_size: int) -> np.ndarray:
    """Mean of each ``patch_size x patch_size`` block, ignoring NaN cells.

    A block with no finite cell stays NaN.
    """
    grid = np.asarray(grid, dtype=np.float64)
    rows, cols = grid.shape
    if patch_size < 1 or rows % patch_size or cols % patch_size:
        raise ConfigError(f"{rows}x{cols} grid is not divisible by patch_size {patch_size}")
    blocks = grid.reshape(rows // patch_size, patch_size, cols // patch_size, patch_size)
    valid = ~np.isnan(blocks)
    counts = valid.sum(axis=(1, 3))
    sums = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


@dataclass(frozen=True)
class PatchLayer:
    """A layer as seen by the feature vector: a ``rows x cols`` grid of patches."""

    name: str
    rows: int
    cols: int

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class FeatureMeans:
    means: np.ndarray
    source: str = "train-split"


@dataclass(frozen=True, eq=False)
class LayeredDataset:
    data: np.ndarray
    layers: tuple[PatchLayer, ...]
    timestamps: tuple[tuple[int, int], ...]
    is_train: np.ndarray
    norm_stats: dict | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DataError("dataset matrix must be 2-D (observations x features)")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "is_train", np.asarray(self.is_train, dtype=bool))
        names = [layer.name for layer in self.layers]
        if not names or len(set(names)) != len(names):
            raise DataError(f"layer names must be unique and non-empty: {names}")
        if sum(layer.size for layer in self.layers) != data.shape[1]:
            raise DataError(
                f"layer sizes sum to {sum(layer.size for layer in self.layers)}, "
                f"data has {data.shape[1]} features"
            )
        if len(self.timestamps) != data.shape[0] or self.is_train.shape != (data.shape[0],):
            raise DataError("timestamps / split must have one entry per observation")

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def layer_partition(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for layer in self.layers:
            out[layer.name] = (start, start + layer.size)
            start += layer.size
        return out

    @property
    def feature_coords(self) -> list[tuple[str, int, int]]:
        return [
            (layer.name, r, c)
            for layer in self.layers
            for r in range(layer.rows)
            for c in range(layer.cols)
        ]

    @property
    def train(self) -> np.ndarray:
        return self.data[self.is_train]

    @property
    def test(self) -> np.ndarray:
        return self.data[~self.is_train]

    def layer(self, name: str) -> PatchLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise DataError(f"unknown layer {name!r}")

    def layer_indices(self, names) -> np.ndarray:
        part = self.layer_partition
        if isinstance(names, str):
            names = [names]
        missing = [nm for nm in names if nm not in part]
        if missing:
            raise DataError(f"unknown layers: {missing}")
        return np.concatenate([np.arange(*part[nm]) for nm in names]).astype(np.intp)

    def feature_index(self, layer: str, row: int, col: int) -> int:
        start, _ = self.layer_partition[layer]
        return start + row * self.layer(layer).cols + col

    def layer_grid(self, values: np.ndarray, layer: str) -> np.ndarray:
        """Reshape the slice of a length-n vector belonging to ``layer`` into its patch grid."""
        start, stop = self.layer_partition[layer]
        spec = self.layer(layer)
        return np.asarray(values)[..., start:stop].reshape(*np.shape(values)[:-1], spec.rows, spec.cols)

    def with_data(self, data) -> "LayeredDataset":
        return replace(self, data=data)


def split_by_suffix(k: int, test_months: int) -> np.ndarray:
    """Boolean train indicator with the last ``test_months`` observations held out."""
    if test_months < 0 or test_months >= k:
        raise ConfigError(f"test_months={test_months} leaves no training data (k={k})")
    is_train = np.ones(k, dtype=bool)
    if test_months:
        is_train[-test_months:] = False
    return is_train


def build_dataset(stack: GridStack, test_months: int = 0) -> LayeredDataset:
    """Patch-average every grid and flatten into a raw (unnormalized) dataset."""
    m = stack.manifest
    ps = m.patch_size
    layers, blocks = [], []
    for spec in m.layers:
        g = stack.grids[spec.name]
        patches = np.stack([patch_average(g[t], ps) for t in range(g.shape[0])])
        layers.append(PatchLayer(spec.name, spec.rows // ps, spec.cols // ps))
        blocks.append(patches.reshape(patches.shape[0], -1))
    data = np.concatenate(blocks, axis=1)
    return LayeredDataset(
        data, tuple(layers), m.timestamps, split_by_suffix(len(m.timestamps), test_months)
    )


def normalize_layers(dataset: LayeredDataset, stats: dict | None = None) -> LayeredDataset:
    """Standardize each layer with training-split mean and population std.

    With ``stats`` given (``{layer: (mean, std)}``), those are applied instead of
    being estimated, which is how held-out data is put on the training scale.
    """
    if stats is None:
        if not dataset.is_train.any():
            raise DataError("training split is empty")
        stats = {}
        train = dataset.train
        for name, (a, b) in dataset.layer_partition.items():
            vals = train[:, a:b]
            vals = vals[~np.isnan(vals)]
            if vals.size == 0:
                raise DataError(f"layer {name} has no observed training values")
            mean, std = float(vals.mean()), float(vals.std())
            if not std > 0.0:
                raise DataError(f"layer {name} has zero variance on the training split")
            stats[name] = (mean, std)
    out = dataset.data.copy()
    for name, (a, b) in dataset.layer_partition.items():
        mean, std = stats[name]
        out[:, a:b] = (out[:, a:b] - mean) / std
    return replace(dataset, data=out, norm_stats={k: tuple(v) for k, v in stats.items()})


def denormalize(values: np.ndarray, dataset: LayeredDataset) -> np.ndarray:
    out = np.array(values, dtype=np.float64, copy=True)
    for name, (a, b) in dataset.layer_partition.items():
        mean, std = dataset.norm_stats[name]
        out[..., a:b] = out[..., a:b] * std + mean
    return out


def compute_feature_means(dataset: LayeredDataset) -> FeatureMeans:
    """Training-split mean of every feature.

    A feature never observed in training falls back to its layer's training
    mean (zero once normalized), so it can still be imputed.
    """
    train = dataset.train
    if train.shape[0] == 0:
        raise DataError("training split is empty")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        means = np.nanmean(train, axis=0)
        for name, (a, b) in dataset.layer_partition.items():
            block = means[a:b]
            if np.isnan(block).any():
                fill = np.nanmean(train[:, a:b])
                block[np.isnan(block)] = 0.0 if np.isnan(fill) else fill
    return FeatureMeans(means)


def export_csv(dataset: LayeredDataset, path) -> None:
    """Long-format export: ``timestamp,layer,patch_row,patch_col,value``."""
    coords = dataset.feature_coords
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "layer", "patch_row", "patch_col", "value"])
        for (year, month), row in zip(dataset.timestamps, dataset.data):
            stamp = f"{year:04d}-{month:02d}"
            for (layer, r, c), v in zip(coords, row):
                w.writerow([stamp, layer, r, c, repr(float(v))])
    os.replace(tmp, path)
