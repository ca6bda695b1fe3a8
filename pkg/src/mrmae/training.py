"""Masked-autoencoder training: mask, predict, weighted loss, update."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from mrmae.dataset import LayeredDataset, compute_feature_means
from mrmae.errors import ConfigError, TrainingError
from mrmae.masking import Mask, MaskPolicy, make_rng, sample_mask_matrix
from mrmae.nnet import MlpModel, OptimState, backward, forward_cache, step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    base: str = "l1"
    masked_weight: float = 1.0
    unmasked_weight: float = 0.1

    def __post_init__(self):
        if self.base not in ("l1", "l2"):
            raise ConfigError(f"loss base must be l1 or l2, got {self.base!r}")
        if self.masked_weight < 0 or self.unmasked_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.masked_weight + self.unmasked_weight <= 0:
            raise ConfigError("masked_weight + unmasked_weight must be positive")


def feature_losses(x, p, base: str = "l1") -> np.ndarray:
    d = np.asarray(p, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return np.abs(d) if base == "l1" else d * d


def masked_loss(x, p, mask, cfg: LossConfig = LossConfig()):
    """Returns ``(scalar, per_feature)`` for one observation.

    scalar = (masked_weight * sum over masked + unmasked_weight * sum over visible) / n
    """
    per = feature_losses(x, p, cfg.base)
    flags = mask.as_bool() if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    w = np.where(flags, cfg.masked_weight, cfg.unmasked_weight)
    return float((w * per).sum() / per.shape[-1]), per


def batch_loss_grad(X, P, M, cfg: LossConfig, valid=None, row_weight=None):
    """Weighted mean of per-row masked losses and its gradient w.r.t. ``P``.

    ``valid`` zeroes entries with no ground truth; ``row_weight`` reweights rows.
    Returns ``(loss, grad, per_row_loss, per_entry_loss)``.
    """
    B, n = P.shape
    d = P - X
    per = np.abs(d) if cfg.base == "l1" else d * d
    dper = np.sign(d) if cfg.base == "l1" else 2.0 * d
    w = np.where(M, cfg.masked_weight, cfg.unmasked_weight)
    if valid is not None:
        w = w * valid
    rows = (w * per).sum(axis=1) / n
    rw = np.ones(B) if row_weight is None else np.asarray(row_weight, dtype=np.float64)
    total = rw.sum()
    loss = float((rw * rows).sum() / total)
    grad = (rw / total)[:, None] * w * dper / n
    return loss, grad, rows, per


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    policy: MaskPolicy = field(default_factory=lambda: MaskPolicy.fixed_fraction(0.7))
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta: float = 0.9
    hidden: tuple | None = None
    activation: str = "relu"
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def hidden_dims(self, n: int) -> list[int]:
        return [4 * n, 4 * n] if self.hidden is None else [int(h) for h in self.hidden]

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "policy" in doc:
            doc["policy"] = MaskPolicy.from_dict(doc["policy"])
        if "loss" in doc:
            doc["loss"] = LossConfig(**doc["loss"])
        if doc.get("hidden") is not None:
            doc["hidden"] = tuple(doc["hidden"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["policy"] = self.policy.to_dict()
        out["hidden"] = None if self.hidden is None else list(self.hidden)
        return out


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    snapshots: list[MlpModel] = field(default_factory=list)

    def to_csv(self, path) -> None:
        cols = ["epoch", "mean_loss", "masked_loss", "unmasked_loss"]
        extra = sorted({k for r in self.records for k in r} - set(cols))
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols + extra)
            for r in self.records:
                w.writerow([r["epoch"]] + [repr(float(r.get(c, float("nan")))) for c in cols[1:] + extra])
        os.replace(tmp, path)

    @property
    def mean_losses(self) -> np.ndarray:
        return np.array([r["mean_loss"] for r in self.records])


def train_on_matrix(
    X,
    means,
    layer_partition,
    cfg: TrainConfig,
    sample_weight=None,
    groups=None,
    model: MlpModel | None = None,
):
    """Train an autoencoder on the rows of ``X`` (NaN = missing, never scored).

    ``groups`` (one string label per row) adds a per-group mean loss to the log.
    Returns ``(model, TrainLog)``.
    """
    X = np.asarray(X, dtype=np.float64)
    k, n = X.shape
    if k == 0:
        raise ConfigError("no training observations")
    means = np.asarray(getattr(means, "means", means), dtype=np.float64)
    missing = np.isnan(X)
    Xf = np.where(missing, means, X)
    valid = (~missing).astype(np.float64)
    if model is None:
        model = MlpModel.init([n, *cfg.hidden_dims(n), n], cfg.activation, seed=cfg.seed)
    optim = OptimState.create(model, cfg.optimizer, cfg.learning_rate, cfg.beta)
    shuffle_rng = make_rng(cfg.seed)
    mask_rng = cfg.policy.rng()
    weights = None if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    labels = None if groups is None else np.asarray(groups)
    tlog = TrainLog()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(k)
        tot = m_sum = m_cnt = u_sum = u_cnt = 0.0
        row_losses = np.empty(k)
        for start in range(0, k, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            M = sample_mask_matrix(cfg.policy, n, layer_partition, mask_rng, idx.size) | missing[idx]
            F = np.where(M, means, Xf[idx])
            P, cache = forward_cache(model, F)
            rw = None if weights is None else weights[idx]
            loss, grad, rows, per = batch_loss_grad(Xf[idx], P, M, cfg.loss, valid[idx], rw)
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            try:
                step(model, backward(model, F, grad, cache), optim)
            except TrainingError as exc:
                raise TrainingError(str(exc), epoch) from exc
            tot += loss * idx.size
            row_losses[idx] = rows
            vm, vu = M & ~missing[idx], ~M
            m_sum += per[vm].sum()
            m_cnt += vm.sum()
            u_sum += per[vu].sum()
            u_cnt += vu.sum()
        rec = {
            "epoch": epoch,
            "mean_loss": tot / k,
            "masked_loss": m_sum / m_cnt if m_cnt else float("nan"),
            "unmasked_loss": u_sum / u_cnt if u_cnt else float("nan"),
        }
        if labels is not None:
            for g in sorted(set(labels.tolist())):
                rec[f"loss_{g}"] = float(row_losses[labels == g].mean())
        tlog.records.append(rec)
        if cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
            tlog.snapshots.append(model.copy())
        log.debug("epoch %d loss %.6f", epoch, rec["mean_loss"])
    return model, tlog


def train(dataset: LayeredDataset, cfg: TrainConfig):
    """Train on the dataset's training split; returns ``(model, TrainLog)``."""
    if not dataset.is_train.any():
        raise ConfigError("training split is empty")
    means = compute_feature_means(dataset)
    return train_on_matrix(dataset.train, means, dataset.layer_partition, cfg)
