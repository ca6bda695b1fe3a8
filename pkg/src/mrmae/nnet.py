"""A small fully-connected network with hand-written backprop.

Everything is float64. Inputs are rows: a batch ``F`` of shape ``(B, n_in)``
maps to ``(B, n_out)``; 1-D inputs are treated as a batch of one and
returned 1-D.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mrmae.errors import ConfigError, DataError, TrainingError

MAGIC = b"MRMAE1"
ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(f"layer {i} expects {w.shape[1]} inputs, previous emits {self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, dims, activation: str = "relu", seed: int = 0) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigError(f"bad layer dims {dims}")
        rng = np.random.Generator(np.random.PCG64(seed))
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def param_count(self) -> int:
        return param_count(self.layer_dims)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def __call__(self, f):
        return forward(self, f)


def param_count(dims) -> int:
    return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))


def forward_cache(model: MlpModel, F: np.ndarray):
    """Forward pass on a 2-D batch, keeping what backward needs."""
    a = F
    cache = []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        nxt = z if i == last else _act(model.activation, z)
        cache.append((a, z, nxt))
        a = nxt
    return a, cache


def forward(model: MlpModel, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if not np.isfinite(f).all():
        raise DataError("non-finite input to forward")
    single = f.ndim == 1
    out, _ = forward_cache(model, f[None, :] if single else f)
    return out[0] if single else out


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward(model: MlpModel, f, grad_out, cache=None) -> Gradients:
    """Gradients of the scalar whose derivative w.r.t. the outputs is ``grad_out``.

    For a batch, ``grad_out`` rows are per-sample output gradients and the
    parameter gradients are summed over the batch.
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f, g = f[None, :], g[None, :]
    if cache is None:
        _, cache = forward_cache(model, f)
    last = len(model.weights) - 1
    dws, dbs = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(last, -1, -1):
        a_in, z, a_out = cache[i]
        if i != last:
            g = g * _act_grad(model.activation, z, a_out)
        dws[i] = g.T @ a_in
        dbs[i] = g.sum(axis=0)
        g = g @ model.weights[i]
    return Gradients(dws, dbs, g[0] if single else g)


OPTIMIZERS = ("sgd", "momentum", "adam")


@dataclass
class OptimState:
    learning_rate: float
    kind: str = "sgd"
    beta: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulators: list = field(default_factory=list)
    second: list = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")

    @classmethod
    def create(cls, model: MlpModel, kind: str = "sgd", learning_rate: float = 0.01, beta: float = 0.9, **kw) -> "OptimState":
        state = cls(learning_rate, kind, beta, **kw)
        if kind != "sgd":
            state.accumulators = [np.zeros_like(p) for p in model.params()]
        if kind == "adam":
            state.second = [np.zeros_like(p) for p in model.params()]
        return state


def step(model: MlpModel, grads: Gradients, optim: OptimState) -> MlpModel:
    """Apply one update in place and return the model.

    sgd: ``p -= lr * g``; momentum: ``v = beta * v + g; p -= lr * v``;
    adam: bias-corrected first/second moments.
    """
    params, gs = model.params(), grads.params()
    if len(params) != len(gs) or any(p.shape != g.shape for p, g in zip(params, gs)):
        raise ConfigError("gradient shapes do not match the model")
    lr = optim.learning_rate
    if optim.kind == "sgd":
        for p, g in zip(params, gs):
            p -= lr * g
    elif optim.kind == "momentum":
        for p, g, v in zip(params, gs, optim.accumulators):
            v *= optim.beta
            v += g
            p -= lr * v
    else:
        optim.t += 1
        c1 = 1.0 - optim.beta**optim.t
        c2 = 1.0 - optim.beta2**optim.t
        for p, g, m, v in zip(params, gs, optim.accumulators, optim.second):
            m *= optim.beta
            m += (1.0 - optim.beta) * g
            v *= optim.beta2
            v += (1.0 - optim.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + optim.eps)
    if not all(np.isfinite(p).all() for p in params):
        raise TrainingError("parameters became non-finite (divergence)")
    return model


# checkpoint container: MAGIC, u32 kind-length, kind, u32 depth, u32 dims..., f64 params


def save_checkpoint(path, model: MlpModel, kind: str = "mae", meta: dict | None = None) -> None:
    """Binary parameters plus a ``<path>.json`` sidecar describing them."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = model.layer_dims
    tag = kind.encode()
    chunks = [MAGIC, struct.pack("<I", len(tag)), tag, struct.pack("<I", len(dims))]
    chunks.append(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(model.weights, model.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    blob = b"".join(chunks)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    side = {
        "kind": kind,
        "layer_dims": dims,
        "activation": model.activation,
        "param_count": model.param_count,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    side.update(meta or {})
    sidecar = path.with_name(path.name + ".json")
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    tmp.replace(sidecar)


def load_checkpoint(path):
    """Returns ``(model, sidecar_dict)``."""
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path} is not a model checkpoint (bad magic)")
    off = len(MAGIC)
    (tlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    kind = blob[off : off + tlen].decode()
    off += tlen
    (depth,) = struct.unpack_from("<I", blob, off)
    off += 4
    dims = list(struct.unpack_from(f"<{depth}I", blob, off))
    off += 4 * depth
    weights, biases = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=o * i, offset=off).reshape(o, i).astype(np.float64)
        off += 8 * o * i
        b = np.frombuffer(blob, dtype="<f8", count=o, offset=off).astype(np.float64)
        off += 8 * o
        weights.append(w)
        biases.append(b)
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")
    sidecar_path = path.with_name(path.name + ".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {"kind": kind}
    activation = meta.get("activation", "relu")
    return MlpModel(weights, biases, activation), meta
