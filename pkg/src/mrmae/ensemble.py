"""Implicit ensembles: re-mask a partially known input many times and average."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mrmae.errors import ConfigError
from mrmae.masking import Mask, MaskPolicy, make_rng, superset_mask_matrix
from mrmae.nnet import MlpModel, forward


class MeanAggregator:
    """Average of the member predictions, accumulated in member order."""

    name = "mean"

    def __call__(self, members: np.ndarray) -> np.ndarray:
        # members: (l, ...) ; explicit left-to-right sum keeps the reduction order fixed
        acc = np.array(members[0], dtype=np.float64, copy=True)
        for q in members[1:]:
            acc += q
        return acc / len(members)


AGGREGATORS = {"mean": MeanAggregator}


@dataclass(frozen=True)
class EnsembleConfig:
    iterations: int = 32
    policy: MaskPolicy = field(default_factory=lambda: MaskPolicy.fixed_fraction(0.6))
    aggregator: str = "mean"
    seed: int = 0
    # False: a given mask already past the target is used as is (sweeps)
    strict: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("ensemble needs at least one iteration")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "policy": self.policy.to_dict(),
            "aggregator": self.aggregator,
            "seed": int(self.seed),
            "strict": self.strict,
        }


def _as_bool(mask, n):
    if isinstance(mask, Mask):
        return mask.as_bool()
    return np.asarray(mask, dtype=bool).reshape(n)


def ensemble_predict(
    model: MlpModel,
    x_masked,
    base_mask,
    means,
    cfg: EnsembleConfig,
    rng=None,
    return_members: bool = False,
    layer_partition=None,
):
    """Aggregate prediction for one already-masked input.

    Each member re-masks ``x_masked`` with a random superset of ``base_mask``
    (sized by ``cfg.policy``) and runs the model. All ``n`` outputs are
    returned; callers that want known inputs passed through overwrite them.
    With ``return_members`` the ``(l, n)`` member predictions and ``(l, n)``
    member masks come back as well.
    """
    x_masked = np.asarray(x_masked, dtype=np.float64)
    n = x_masked.shape[-1]
    means = np.asarray(getattr(means, "means", means), dtype=np.float64)
    base = _as_bool(base_mask, n)
    rng = make_rng(cfg.seed) if rng is None else rng
    masks = superset_mask_matrix(base, cfg.policy, layer_partition, rng, cfg.iterations, cfg.strict)
    members = forward(model, np.where(masks, means, x_masked))
    p = AGGREGATORS[cfg.aggregator]()(members)
    if return_members:
        return p, members, masks
    return p


def ensemble_predict_batch(model: MlpModel, X_masked, base_masks, means, cfg: EnsembleConfig, layer_partition=None):
    """Row-wise :func:`ensemble_predict`; row ``i`` draws from ``make_rng((cfg.seed, i))``."""
    X_masked = np.asarray(X_masked, dtype=np.float64)
    B, n = X_masked.shape
    means = np.asarray(getattr(means, "means", means), dtype=np.float64)
    base_masks = np.broadcast_to(np.asarray(base_masks, dtype=bool), (B, n))
    l = cfg.iterations
    all_masks = np.empty((B, l, n), dtype=bool)
    for i in range(B):
        all_masks[i] = superset_mask_matrix(base_masks[i], cfg.policy, layer_partition, make_rng((cfg.seed, i)), l, cfg.strict)
    inputs = np.where(all_masks, means, X_masked[:, None, :]).reshape(B * l, n)
    members = forward(model, inputs).reshape(B, l, -1)
    return AGGREGATORS[cfg.aggregator]()(np.moveaxis(members, 1, 0))
