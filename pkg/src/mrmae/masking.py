"""Random mask policies and mean-imputation masking.

Masks are drawn with numpy's ``PCG64`` bit generator (pinned in ``RNG_IDENTITY``
and echoed in every run record). The batched samplers return boolean
``(B, n)`` arrays, ``True`` meaning masked; :class:`Mask` is the single-row
index-set view of the same thing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from mrmae.errors import ConfigError, DataError, PolicyError

RNG_IDENTITY = f"numpy.random.PCG64 (numpy {np.__version__.split('.')[0]}.x)"

KINDS = ("fixed_fraction", "uniform_fraction", "layer_subset")


def make_rng(seed) -> np.random.Generator:
    """``seed`` may be an int or a tuple of ints (e.g. ``(seed, worker)``)."""
    return np.random.Generator(np.random.PCG64(seed))


def round_half_up(x: float) -> int:
    # 1e-9 guards products like 0.35 * 10 landing just under .5
    return int(math.floor(x + 0.5 + 1e-9))


def target_size(frac: float, n: int) -> int:
    """``round(frac * n)`` capped so at least one feature stays visible."""
    size = round_half_up(frac * n)
    return min(size, n - 1) if n > 1 else min(size, n)


@dataclass(frozen=True)
class Mask:
    """A set of masked feature indices over an ``n``-feature vector."""

    indices: tuple[int, ...]
    n: int

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if idx and (idx[0] < 0 or idx[-1] >= self.n):
            raise DataError(f"mask index out of range for n={self.n}: {idx}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_bool(cls, flags) -> "Mask":
        flags = np.asarray(flags, dtype=bool)
        return cls(tuple(np.flatnonzero(flags).tolist()), flags.size)

    @classmethod
    def empty(cls, n: int) -> "Mask":
        return cls((), n)

    @property
    def members(self) -> frozenset[int]:
        return frozenset(self.indices)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        out[list(self.indices)] = True
        return out

    def __len__(self):
        return len(self.indices)

    def __contains__(self, j):
        return j in self.members

    def issubset(self, other: "Mask") -> bool:
        return self.members <= other.members


@dataclass(frozen=True)
class MaskPolicy:
    kind: str
    p: float = 0.0
    lo: float = 0.0
    hi: float = 0.99
    q: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown mask policy kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "fixed_fraction" and not 0.0 <= self.p < 1.0:
            raise ConfigError(f"fixed_fraction needs 0 <= p < 1, got {self.p}")
        if self.kind == "uniform_fraction" and not 0.0 <= self.lo <= self.hi < 1.0:
            raise ConfigError(f"uniform_fraction needs 0 <= lo <= hi < 1, got [{self.lo}, {self.hi}]")
        if self.kind == "layer_subset":
            if not 0.0 <= self.q <= 1.0:
                raise ConfigError(f"layer_subset needs 0 <= q <= 1, got {self.q}")
            if self.q == 1.0:
                # every draw would mask all layers and the resampling loop never ends
                raise ConfigError("layer_subset with q=1.0 always masks every layer")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @classmethod
    def fixed_fraction(cls, p: float, seed: int = 0) -> "MaskPolicy":
        return cls("fixed_fraction", p=p, seed=seed)

    @classmethod
    def uniform_fraction(cls, lo: float = 0.0, hi: float = 0.99, seed: int = 0) -> "MaskPolicy":
        return cls("uniform_fraction", lo=lo, hi=hi, seed=seed)

    @classmethod
    def layer_subset(cls, q: float, seed: int = 0) -> "MaskPolicy":
        return cls("layer_subset", q=q, seed=seed)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MaskPolicy":
        doc = dict(doc)
        kind = doc.pop("kind", None)
        allowed = {"p", "lo", "hi", "q", "seed"}
        unknown = set(doc) - allowed
        if kind is None or unknown:
            raise ConfigError(f"bad mask policy {doc!r} (kind={kind!r}, unknown keys {sorted(unknown)})")
        return cls(kind, **doc)

    def to_dict(self) -> dict:
        keys = {"fixed_fraction": ("p",), "uniform_fraction": ("lo", "hi"), "layer_subset": ("q",)}[self.kind]
        out = {"kind": self.kind}
        out.update({k: getattr(self, k) for k in keys})
        out["seed"] = int(self.seed)
        return out

    def rng(self, worker: int = 0) -> np.random.Generator:
        return make_rng(int(self.seed) + worker)


def _partition_ranges(layer_partition, n) -> list[tuple[int, int]]:
    if layer_partition is None:
        return [(0, n)]
    ranges = list(layer_partition.values()) if isinstance(layer_partition, Mapping) else list(layer_partition)
    return [tuple(r) for r in ranges]


def _ranked_subset(keys: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Rows of ``keys`` -> boolean rows selecting the ``sizes[i]`` smallest keys.

    With i.i.d. uniform keys this is a uniform draw without replacement.
    """
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    return ranks < sizes[:, None]


def sample_mask_matrix(policy: MaskPolicy, n: int, layer_partition, rng, size: int) -> np.ndarray:
    """``size`` independent masks as a ``(size, n)`` boolean array."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if policy.kind == "fixed_fraction":
        sizes = np.full(size, target_size(policy.p, n))
        return _ranked_subset(rng.random((size, n)), sizes)
    if policy.kind == "uniform_fraction":
        fracs = rng.uniform(policy.lo, policy.hi, size=size)
        sizes = np.array([target_size(f, n) for f in fracs], dtype=np.int64)
        return _ranked_subset(rng.random((size, n)), sizes)
    ranges = _partition_ranges(layer_partition, n)
    out = np.zeros((size, n), dtype=bool)
    for i in range(size):
        while True:
            picks = rng.random(len(ranges)) < policy.q
            if not picks.all():
                break
        for (a, b), hit in zip(ranges, picks):
            if hit:
                out[i, a:b] = True
    return out


def sample_mask(policy: MaskPolicy, n: int, layer_partition=None, rng=None) -> Mask:
    rng = policy.rng() if rng is None else rng
    return Mask.from_bool(sample_mask_matrix(policy, n, layer_partition, rng, 1)[0])


def apply_mask(x, mask, means) -> np.ndarray:
    """Replace masked entries of ``x`` by the feature means.

    ``mask`` is a :class:`Mask` or a boolean array broadcastable to ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    means = means.means if hasattr(means, "means") else np.asarray(means, dtype=np.float64)
    if x.shape[-1] != means.shape[-1]:
        raise DataError(f"x has {x.shape[-1]} features, means has {means.shape[-1]}")
    flags = mask.as_bool() if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if flags.shape[-1] != x.shape[-1]:
        raise DataError("mask and x disagree on the number of features")
    return np.where(flags, means, x)


def superset_mask_matrix(
    base: np.ndarray, policy: MaskPolicy, layer_partition, rng, size: int, strict: bool = True
) -> np.ndarray:
    """``size`` masks, each a superset of the boolean ``base`` mask.

    Fraction policies top the base up to the policy's target size with indices
    drawn uniformly from its complement; ``layer_subset`` takes the union of
    the base with a fresh whole-layer draw. A fixed target below ``|base|`` is
    an error when ``strict``, otherwise the base is returned unchanged.
    """
    base = np.asarray(base, dtype=bool)
    n = base.size
    nb = int(base.sum())
    if nb >= n:
        raise PolicyError("base mask already covers every feature")
    if policy.kind == "layer_subset":
        return sample_mask_matrix(policy, n, layer_partition, rng, size) | base
    if policy.kind == "fixed_fraction":
        want = target_size(policy.p, n)
        if want < nb and strict:
            raise PolicyError(
                f"ensemble fraction below given-mask fraction: target {want} < |base| {nb}"
            )
        extra = np.full(size, max(want - nb, 0))
    else:
        fracs = rng.uniform(policy.lo, policy.hi, size=size)
        extra = np.array([max(target_size(f, n) - nb, 0) for f in fracs], dtype=np.int64)
    free = np.flatnonzero(~base)
    chosen = _ranked_subset(rng.random((size, free.size)), extra)
    out = np.repeat(base[None, :], size, axis=0)
    out[:, free] = chosen
    return out


def sample_superset_mask(base: Mask, policy: MaskPolicy, n: int, layer_partition=None, rng=None) -> Mask:
    if base.n != n:
        raise DataError(f"base mask is over {base.n} features, expected {n}")
    rng = policy.rng() if rng is None else rng
    return Mask.from_bool(superset_mask_matrix(base.as_bool(), policy, layer_partition, rng, 1)[0])


def mask_from_layers(layer_partition: Mapping, names: Iterable[str], n: int) -> np.ndarray:
    out = np.zeros(n, dtype=bool)
    for name in names:
        if name not in layer_partition:
            raise ConfigError(f"unknown layer {name!r}; have {sorted(layer_partition)}")
        a, b = layer_partition[name]
        out[a:b] = True
    return out
