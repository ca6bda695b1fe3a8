"""Synthetic layered datasets with planted dependencies.

Root layers are noisy linear read-outs of a few shared AR(1) latent factors
(optionally with a yearly cycle); dependent layers are built patch-by-patch
from other layers (linear mix, product, one-month lag). Feature-level plants
copy one feature into another, and drifts add a linear trend in time.
Everything is seeded; the ground truth is saved next to the grids.
"""

from __future__ import annotations

import graphlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mrmae.dataset import DEFAULT_PATTERN, LayeredDataset, LayerManifest, LayerSpec, PatchLayer, split_by_suffix, write_grid
from mrmae.errors import ConfigError
from mrmae.masking import make_rng

DEP_KINDS = ("linear", "product", "lag")


@dataclass(frozen=True)
class Dependency:
    target: str
    kind: str
    sources: tuple[str, ...]
    coefs: tuple[float, ...] = (1.0,)
    noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "coefs", tuple(float(c) for c in self.coefs))
        if self.kind not in DEP_KINDS:
            raise ConfigError(f"unknown dependency kind {self.kind!r}")
        if self.noise < 0:
            raise ConfigError("noise sigma must be >= 0")
        if not self.sources:
            raise ConfigError(f"dependency for {self.target} has no sources")
        if self.kind == "linear" and len(self.coefs) != len(self.sources):
            raise ConfigError("linear dependency needs one coefficient per source")
        if self.kind == "lag" and len(self.sources) != 1:
            raise ConfigError("lag dependency takes exactly one source")


@dataclass(frozen=True)
class Plant:
    """Feature-level plant: ``target = coef * source + noise``."""

    target: tuple[str, int, int]
    source: tuple[str, int, int]
    coef: float = 1.0
    noise: float = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    layers: tuple[tuple[str, int, int], ...]  # (name, patch rows, patch cols)
    dependencies: tuple[Dependency, ...] = ()
    plants: tuple[Plant, ...] = ()
    drift: tuple[tuple[str, float], ...] = ()  # (layer, slope per month)
    k: int = 120
    start: tuple[int, int] = (2004, 1)
    latent_dim: int = 4
    root_noise: float = 0.1
    layer_noise: tuple[tuple[str, float], ...] = ()  # per-layer override of root_noise
    seasonal: float = 0.0
    ar: float = 0.8
    patch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        names = [name for name, _, _ in self.layers]
        if not names or len(set(names)) != len(names):
            raise ConfigError(f"layer names must be unique and non-empty: {names}")
        if self.k < 1 or self.latent_dim < 1 or self.patch_size < 1:
            raise ConfigError("k, latent_dim and patch_size must be >= 1")
        if self.root_noise < 0:
            raise ConfigError("root_noise must be >= 0")
        known = set(names)
        for dep in self.dependencies:
            if dep.target not in known or set(dep.sources) - known:
                raise ConfigError(f"dependency refers to unknown layers: {dep}")
        targets = [dep.target for dep in self.dependencies]
        if len(set(targets)) != len(targets):
            raise ConfigError("a layer may be the target of only one dependency")
        for layer, _ in self.drift:
            if layer not in known:
                raise ConfigError(f"drift on unknown layer {layer}")
        for layer, sigma in self.layer_noise:
            if layer not in known or sigma < 0:
                raise ConfigError(f"bad layer_noise entry ({layer}, {sigma})")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        doc = dict(doc)
        try:
            doc["layers"] = tuple((str(d["name"]), int(d["rows"]), int(d["cols"])) for d in doc["layers"])
            doc["dependencies"] = tuple(Dependency(**d) for d in doc.get("dependencies", ()))
            doc["plants"] = tuple(
                Plant(tuple(p["target"]), tuple(p["source"]), p.get("coef", 1.0), p.get("noise", 0.0))
                for p in doc.get("plants", ())
            )
            doc["drift"] = tuple((str(k), float(v)) for k, v in dict(doc.get("drift", {})).items())
            doc["layer_noise"] = tuple((str(k), float(v)) for k, v in dict(doc.get("layer_noise", {})).items())
            if "start" in doc:
                doc["start"] = tuple(doc["start"])
            return cls(**doc)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad synthetic spec: {exc!r}") from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layers"] = [{"name": n, "rows": r, "cols": c} for n, r, c in self.layers]
        out["dependencies"] = [
            {"target": d.target, "kind": d.kind, "sources": list(d.sources), "coefs": list(d.coefs), "noise": d.noise}
            for d in self.dependencies
        ]
        out["plants"] = [
            {"target": list(p.target), "source": list(p.source), "coef": p.coef, "noise": p.noise} for p in self.plants
        ]
        out["drift"] = {k: v for k, v in self.drift}
        out["layer_noise"] = {k: v for k, v in self.layer_noise}
        out["start"] = list(self.start)
        return out


def timestamps_from(start, k):
    y, m = start
    out = []
    for _ in range(k):
        out.append((y, m))
        m += 1
        if m > 12:
            y, m = y + 1, 1
    return tuple(out)


def layer_order(spec: SyntheticSpec) -> list[str]:
    """Generation order; raises ``ConfigError`` on a cyclic dependency graph."""
    graph = {name: set() for name, _, _ in spec.layers}
    for dep in spec.dependencies:
        graph[dep.target] |= set(dep.sources)
    try:
        order = list(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        raise ConfigError(f"dependency graph is cyclic: {exc.args[1]}") from exc
    # stable: manifest order among layers that are ready together
    rank = {name: i for i, (name, _, _) in enumerate(spec.layers)}
    done, out = set(), []
    while len(out) < len(order):
        ready = [n for n in order if n not in done and graph[n] <= done]
        nxt = min(ready, key=rank.get)
        out.append(nxt)
        done.add(nxt)
    return out


def generate(spec: SyntheticSpec) -> tuple[np.ndarray, tuple[PatchLayer, ...], tuple]:
    """Returns ``(data (k, n), layers, timestamps)``."""
    order = layer_order(spec)
    rng = make_rng(spec.seed)
    k = spec.k
    stamps = timestamps_from(spec.start, k)
    shapes = {name: (r, c) for name, r, c in spec.layers}
    deps = {d.target: d for d in spec.dependencies}
    noise = dict(spec.layer_noise)

    # shared latent factors, unit stationary variance
    Z = np.empty((k, spec.latent_dim))
    Z[0] = rng.standard_normal(spec.latent_dim)
    innov = np.sqrt(1.0 - spec.ar**2)
    for t in range(1, k):
        Z[t] = spec.ar * Z[t - 1] + innov * rng.standard_normal(spec.latent_dim)
    month = np.array([m for _, m in stamps], dtype=np.float64)

    values: dict[str, np.ndarray] = {}
    for name in order:
        r, c = shapes[name]
        size = r * c
        dep = deps.get(name)
        if dep is None:
            load = rng.standard_normal((spec.latent_dim, size)) / np.sqrt(spec.latent_dim)
            phase = rng.uniform(0.0, 2.0 * np.pi, size)
            block = Z @ load + noise.get(name, spec.root_noise) * rng.standard_normal((k, size))
            if spec.seasonal:
                block += spec.seasonal * np.sin(2.0 * np.pi * (month[:, None] - 1.0) / 12.0 + phase)
        else:
            for src in dep.sources:
                if shapes[src] != (r, c):
                    raise ConfigError(f"{name} and its source {src} have different patch grids")
            srcs = [values[s] for s in dep.sources]
            if dep.kind == "linear":
                block = sum(coef * s for coef, s in zip(dep.coefs, srcs))
            elif dep.kind == "product":
                block = dep.coefs[0] * np.prod(srcs, axis=0)
            else:
                block = dep.coefs[0] * np.vstack([srcs[0][:1], srcs[0][:-1]])
            block = block + dep.noise * rng.standard_normal((k, size))
        values[name] = block

    for plant in spec.plants:
        (tl, tr, tc), (sl, sr, sc) = plant.target, plant.source
        src = values[sl][:, sr * shapes[sl][1] + sc]
        values[tl][:, tr * shapes[tl][1] + tc] = plant.coef * src + plant.noise * rng.standard_normal(k)

    t_idx = np.arange(k, dtype=np.float64)
    for layer, slope in spec.drift:
        values[layer] = values[layer] + slope * t_idx[:, None]

    layers = tuple(PatchLayer(name, r, c) for name, r, c in spec.layers)
    data = np.concatenate([values[name] for name, _, _ in spec.layers], axis=1)
    return data, layers, stamps


def synth_dataset(spec: SyntheticSpec, test_months: int = 0) -> LayeredDataset:
    """In-memory raw dataset (no file round trip, no float32 rounding)."""
    data, layers, stamps = generate(spec)
    return LayeredDataset(data, layers, stamps, split_by_suffix(spec.k, test_months))


def write_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Emit ``manifest.json``, grid files and ``truth.json``; returns the manifest path.

    Every pixel of a patch carries the patch value, so patch averaging the
    grids recovers the generated features (at float32 precision).
    """
    data, layers, stamps = generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ps = spec.patch_size
    manifest = LayerManifest(
        tuple(LayerSpec(L.name, L.rows * ps, L.cols * ps) for L in layers), ps, stamps, DEFAULT_PATTERN
    )
    start = 0
    for L in layers:
        block = data[:, start : start + L.size].reshape(spec.k, L.rows, L.cols)
        start += L.size
        for t, (y, m) in enumerate(stamps):
            grid = np.kron(block[t], np.ones((ps, ps)))
            write_grid(out / manifest.grid_filename(L.name, y, m), grid)
    _write_json(out / "manifest.json", manifest.to_dict())
    _write_json(out / "truth.json", spec.to_dict())
    return out / "manifest.json"


def _write_json(path: Path, doc) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# Presets used by the demos and the acceptance suite.


def planted_spec(seed: int = 0, k: int = 600, **kw) -> SyntheticSpec:
    """Three 4x4 layers (48 features): A and B read out three shared latents, C is a noisy mix of A and B."""
    base = dict(
        layers=(("A", 4, 4), ("B", 4, 4), ("C", 4, 4)),
        dependencies=(Dependency("C", "linear", ("A", "B"), (0.6, 0.8), 0.5),),
        k=k,
        latent_dim=3,
        root_noise=0.1,
        seed=seed,
    )
    base.update(kw)
    return SyntheticSpec(**base)


def copy_plant_spec(seed: int = 0, source=("A", 0, 1), target=("B", 2, 2), noise: float = 0.05, **kw) -> SyntheticSpec:
    """Two 3x3 layers with weak shared structure and one feature planted as a noisy copy of another."""
    base = dict(
        layers=(("A", 3, 3), ("B", 3, 3)),
        plants=(Plant(tuple(target), tuple(source), 1.0, noise),),
        k=300,
        latent_dim=6,
        root_noise=0.6,
        seed=seed,
    )
    base.update(kw)
    return SyntheticSpec(**base)
