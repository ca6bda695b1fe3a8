"""Task-specific comparison models: least squares, lasso and a parameter-matched MLP.

All of them map a fixed set of input layers to a fixed set of output layers,
unlike the autoencoder, which reconstructs whatever is masked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mrmae.dataset import LayeredDataset
from mrmae.errors import ConfigError, DataError, FitError
from mrmae.masking import make_rng
from mrmae.nnet import MlpModel, OptimState, backward, forward, forward_cache, param_count, step

log = logging.getLogger(__name__)

RIDGE = 1e-8

# the comparison task used in the NEO experiments
NEO_OUTPUT_LAYERS = ("FIRE", "LAI", "LSTD_AN", "LSTN_AN", "AOD", "CO", "WV")


@dataclass(frozen=True)
class TaskSpec:
    input_layers: tuple[str, ...]
    output_layers: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_layers", tuple(self.input_layers))
        object.__setattr__(self, "output_layers", tuple(self.output_layers))
        if not self.input_layers or not self.output_layers:
            raise ConfigError("task needs at least one input and one output layer")
        if set(self.input_layers) & set(self.output_layers):
            raise ConfigError("input and output layers overlap")

    @classmethod
    def outputs_vs_rest(cls, dataset: LayeredDataset, outputs) -> "TaskSpec":
        outputs = tuple(outputs)
        unknown = set(outputs) - set(dataset.layer_names)
        if unknown:
            raise ConfigError(f"output layers not in dataset: {sorted(unknown)}")
        return cls(tuple(n for n in dataset.layer_names if n not in outputs), outputs)

    def validate(self, dataset: LayeredDataset) -> None:
        unknown = (set(self.input_layers) | set(self.output_layers)) - set(dataset.layer_names)
        if unknown:
            raise ConfigError(f"task layers not in dataset: {sorted(unknown)}")

    def input_index(self, dataset: LayeredDataset) -> np.ndarray:
        self.validate(dataset)
        return dataset.layer_indices(self.input_layers)

    def output_index(self, dataset: LayeredDataset) -> np.ndarray:
        self.validate(dataset)
        return dataset.layer_indices(self.output_layers)


@dataclass
class LinearModel:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray
    l1_penalty: float = 0.0
    sweeps: int = 0

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights.T + self.bias

    def __call__(self, X):
        return self.predict(X)

    def as_mlp(self) -> MlpModel:
        """Single identity layer, for the shared checkpoint container."""
        return MlpModel([self.weights.copy()], [self.bias.copy()], "identity")


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def lasso_cd(X, Y, penalty, tol=1e-6, max_sweeps=10_000, W0=None):
    """Coordinate descent for ``1/(2k) ||Y - X W||^2 + penalty * |W|_1`` on centered data.

    All output columns are solved together (the problems are separable).
    Stops when the relative duality gap of every column is below ``tol``.
    Returns ``(W (in, out), sweeps)``.
    """
    k, d = X.shape
    W = np.zeros((d, Y.shape[1])) if W0 is None else W0.copy()
    R = Y - X @ W
    col_sq = (X * X).sum(axis=0)
    y_sq = (Y * Y).sum(axis=0)
    for sweep in range(1, max_sweeps + 1):
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            old = W[j].copy()
            rho = X[:, j] @ R + col_sq[j] * old
            W[j] = _soft(rho, k * penalty) / col_sq[j]
            delta = W[j] - old
            if delta.any():
                R -= np.outer(X[:, j], delta)
        if penalty == 0.0:
            # scale-free KKT residual: |X_j . R| / (|X_j| |Y|)
            kkt = np.abs(X.T @ R) / np.sqrt(np.outer(np.maximum(col_sq, 1e-300), np.maximum(y_sq, 1e-300)))
            if kkt.max() <= tol:
                return W, sweep
        elif np.all(_duality_gap(X, Y, W, R, penalty) <= tol * np.maximum(y_sq / k, 1e-300)):
            return W, sweep
    raise FitError(f"lasso did not converge in {max_sweeps} sweeps (penalty {penalty})")


def _duality_gap(X, Y, W, R, penalty):
    k = X.shape[0]
    primal = 0.5 * (R * R).sum(axis=0) / k + penalty * np.abs(W).sum(axis=0)
    dual_norm = np.abs(X.T @ R).max(axis=0) / (k * penalty)
    scale = 1.0 / np.maximum(dual_norm, 1.0)
    theta = R * scale / k
    dual = (theta * Y).sum(axis=0) - 0.5 * k * (theta * theta).sum(axis=0)
    return primal - dual


def fit_linear_matrix(X, Y, l1_penalty: float = 0.0, tol: float = 1e-6, max_sweeps: int = 10_000, sample_weight=None) -> LinearModel:
    # fixed memory layout so BLAS sums in the same order whichever way X was sliced
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    Y = np.ascontiguousarray(Y)
    if X.shape[0] == 0:
        raise DataError("no training rows")
    if l1_penalty < 0:
        raise ConfigError("l1_penalty must be non-negative")
    if sample_weight is not None:
        w = np.asarray(sample_weight, dtype=np.float64)
        x_mean = w @ X / w.sum()
        y_mean = w @ Y / w.sum()
        s = np.sqrt(w * X.shape[0] / w.sum())[:, None]
        Xc, Yc = (X - x_mean) * s, (Y - y_mean) * s
    else:
        x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
        Xc, Yc = X - x_mean, Y - y_mean
    if l1_penalty == 0.0:
        gram = Xc.T @ Xc + RIDGE * np.eye(X.shape[1])
        W = np.linalg.solve(gram, Xc.T @ Yc)
        sweeps = 0
    else:
        W, sweeps = lasso_cd(Xc, Yc, l1_penalty, tol, max_sweeps)
    bias = y_mean - x_mean @ W
    return LinearModel(W.T.copy(), bias, l1_penalty, sweeps)


def fit_linear(dataset: LayeredDataset, task: TaskSpec, l1_penalty: float = 0.0, **kw) -> LinearModel:
    """Least squares (``l1_penalty == 0``) or lasso on the training split."""
    if not dataset.is_train.any():
        raise DataError("training split is empty")
    train = dataset.train
    X = train[:, task.input_index(dataset)]
    Y = train[:, task.output_index(dataset)]
    ok = ~(np.isnan(X).any(axis=1) | np.isnan(Y).any(axis=1))
    return fit_linear_matrix(X[ok], Y[ok], l1_penalty, **kw)


def select_lasso_penalty(X, Y, grid=None, val_fraction: float = 0.2, seed: int = 0):
    """Pick the penalty with the lowest validation L1 error. Returns ``(penalty, scores)``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    grid = np.logspace(-4, 0, 9) if grid is None else np.asarray(grid, dtype=np.float64)
    k = X.shape[0]
    perm = make_rng(seed).permutation(k)
    n_val = max(1, int(round(val_fraction * k)))
    val, tr = perm[:n_val], perm[n_val:]
    scores = {}
    for pen in grid:
        model = fit_linear_matrix(X[tr], Y[tr], float(pen))
        scores[float(pen)] = float(np.abs(model.predict(X[val]) - Y[val]).mean())
    best = min(scores, key=scores.get)
    log.info("lasso penalty %.3g selected (val L1 %.4f)", best, scores[best])
    return best, scores


def two_hidden_count(n_in: int, width: int, n_out: int) -> int:
    return param_count([n_in, width, width, n_out])


def solve_hidden_width(n_in: int, n_out: int, budget: int, rel_tol: float = 0.02) -> int:
    """Width ``h`` of an ``n_in -> h -> h -> n_out`` net whose parameter count is closest to ``budget``."""
    if budget < two_hidden_count(n_in, 1, n_out) * (1 - rel_tol):
        raise ConfigError(f"parameter budget {budget} below the smallest two-hidden-layer net")
    lo, hi = 1, 1
    while two_hidden_count(n_in, hi, n_out) < budget:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if two_hidden_count(n_in, mid, n_out) < budget:
            lo = mid + 1
        else:
            hi = mid
    cands = [h for h in (lo - 1, lo) if h >= 1]
    best = min(cands, key=lambda h: abs(two_hidden_count(n_in, h, n_out) - budget))
    got = two_hidden_count(n_in, best, n_out)
    if abs(got - budget) > rel_tol * budget:
        raise ConfigError(f"no width reaches budget {budget} within {rel_tol:.0%} (closest {got})")
    return best


@dataclass
class TaskMLPConfig:
    epochs: int = 200
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta: float = 0.9
    activation: str = "relu"
    loss: str = "l1"
    seed: int = 0


@dataclass
class TaskMLP:
    model: MlpModel
    input_index: np.ndarray
    output_index: np.ndarray
    history: list = field(default_factory=list)

    def predict(self, X_in) -> np.ndarray:
        return forward(self.model, X_in)

    def __call__(self, X_in):
        return self.predict(X_in)


def fit_mlp_matrix(X, Y, hidden, cfg: TaskMLPConfig, sample_weight=None) -> tuple[MlpModel, list]:
    """Supervised training of an ``X -> Y`` MLP; returns ``(model, per-epoch losses)``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    k = X.shape[0]
    if k == 0:
        raise DataError("no training rows")
    model = MlpModel.init([X.shape[1], *hidden, Y.shape[1]], cfg.activation, seed=cfg.seed)
    optim = OptimState.create(model, cfg.optimizer, cfg.learning_rate, cfg.beta)
    rng = make_rng(cfg.seed)
    rw = np.ones(k) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(k)
        total = 0.0
        for start in range(0, k, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            P, cache = forward_cache(model, X[idx])
            d = P - Y[idx]
            w = rw[idx][:, None] / (rw[idx].sum() * Y.shape[1])
            if cfg.loss == "l1":
                loss, g = float((w * np.abs(d)).sum()), w * np.sign(d)
            else:
                loss, g = float((w * d * d).sum()), 2.0 * w * d
            step(model, backward(model, X[idx], g, cache), optim)
            total += loss * idx.size
        history.append(total / k)
    return model, history


def fit_task_mlp(dataset: LayeredDataset, task: TaskSpec, param_budget: int, cfg: TaskMLPConfig = TaskMLPConfig()) -> TaskMLP:
    """Two-hidden-layer MLP sized to ``param_budget`` (within 2%) and trained on the task."""
    in_idx, out_idx = task.input_index(dataset), task.output_index(dataset)
    width = solve_hidden_width(in_idx.size, out_idx.size, param_budget)
    train = dataset.train
    X, Y = train[:, in_idx], train[:, out_idx]
    ok = ~(np.isnan(X).any(axis=1) | np.isnan(Y).any(axis=1))
    model, history = fit_mlp_matrix(X[ok], Y[ok], [width, width], cfg)
    return TaskMLP(model, in_idx, out_idx, history)
