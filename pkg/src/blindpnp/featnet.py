"""Two-stream point-set feature extractor with exact gradients.

Each stream lifts raw coordinates to a d-channel embedding and applies a
stack of residual blocks: graph edge convolution over a KNN graph, context
normalization across the point set, a per-channel affine, ReLU, and a shared
per-point linear layer. The 3D stream additionally regresses a 3x3 alignment
matrix from the cloud and applies it before lifting. Final descriptors are
row-wise L2 normalized. The streams do not share weights.

Training support: `forward` caches the tape, `backward` replays it, and
`adam_step` applies a bias-corrected Adam update to any parameter store.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import (
    ContractViolationError,
    InvalidInputError,
    NumericFailureError,
)

CN_EPS = 1e-8


@dataclass(frozen=True)
class KnnGraph:
    """Row q lists the k nearest points to q (self excluded), nearest first."""

    neighbor_indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.neighbor_indices, dtype=np.int64)
        if idx.ndim != 2:
            raise InvalidInputError("neighbor_indices must be 2-D")
        object.__setattr__(self, "neighbor_indices", idx)

    @property
    def k(self) -> int:
        return self.neighbor_indices.shape[1]


def knn_graph(points: np.ndarray, k: int) -> KnnGraph:
    """Exact L2 nearest neighbors via the full distance matrix; ties break
    toward the lower index."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = p.shape[0]
    if k >= n:
        raise InvalidInputError(f"k={k} must be < number of points {n}")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    sq = np.sum(p * p, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return KnnGraph(order[:, :k])


def edge_conv(
    features: np.ndarray, graph: KnnGraph, theta: np.ndarray, phi: np.ndarray
) -> np.ndarray:
    """Average over neighbors of theta @ (neighbor - anchor) plus phi @ anchor.

    Pre-activation output; the caller applies normalization/nonlinearity.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    idx = graph.neighbor_indices
    if idx.shape[0] != f.shape[0]:
        raise InvalidInputError("graph and features disagree on point count")
    if theta.shape != phi.shape or theta.shape[0] != f.shape[1]:
        raise InvalidInputError("theta/phi shapes inconsistent with features")
    edge_mean = f[idx].mean(axis=1) - f
    return edge_mean @ theta + f @ phi


def context_normalize(features: np.ndarray) -> np.ndarray:
    """Standardize every channel across the point set (population moments)."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[0] < 2:
        raise InvalidInputError("context normalization needs at least 2 points")
    mu = f.mean(axis=0, keepdims=True)
    var = ((f - mu) ** 2).mean(axis=0, keepdims=True)
    return (f - mu) / np.sqrt(var + CN_EPS)


@dataclass(frozen=True)
class FeatNetConfig:
    dim: int = 128
    blocks: int = 4
    knn: int = 10
    transform_hidden: int = 32
    init_scale: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "FeatNetConfig":
        return FeatNetConfig(**d)


class ParamStore:
    """Ordered name -> float64 ndarray mapping with per-tensor gradient buffers."""

    def __init__(self):
        self.tensors: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise InvalidInputError(f"duplicate parameter {name!r}")
        v = np.asarray(value, dtype=np.float64)
        if not np.isfinite(v).all():
            raise InvalidInputError(f"parameter {name!r} is not finite")
        self.tensors[name] = v
        self.grads[name] = np.zeros_like(v)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self):
        return list(self.tensors.keys())

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for name, value in self.tensors.items():
            if name.startswith(prefix):
                out.tensors[name] = value
                out.grads[name] = self.grads[name]
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.tensors.items():
            out.tensors[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def leaves(self) -> dict[str, ad.Var]:
        return {name: ad.leaf(value, name=name) for name, value in self.tensors.items()}


def init_featnet_params(cfg: FeatNetConfig, rng: np.random.Generator) -> ParamStore:
    """Fresh parameters for both streams; layer shapes are mutually consistent."""
    params = ParamStore()
    for stream, in_dim in (("p3", 3), ("p2", 2)):
        pre = f"featnet/{stream}"
        if stream == "p3":
            h = cfg.transform_hidden
            params.add(f"{pre}/align/w1", rng.normal(0.0, cfg.init_scale, (3, h)))
            params.add(f"{pre}/align/b1", np.zeros(h))
            # Near-zero head so the emitted matrix starts at identity + noise.
            params.add(f"{pre}/align/w2", rng.normal(0.0, 1e-3, (h, 9)))
            params.add(f"{pre}/align/b2", rng.normal(0.0, 1e-3, 9))
        params.add(
            f"{pre}/lift/w", rng.normal(0.0, cfg.init_scale, (in_dim, cfg.dim))
        )
        params.add(f"{pre}/lift/b", np.zeros(cfg.dim))
        for blk in range(cfg.blocks):
            b = f"{pre}/block{blk}"
            scale = cfg.init_scale / np.sqrt(cfg.dim)
            params.add(f"{b}/theta", rng.normal(0.0, scale, (cfg.dim, cfg.dim)))
            params.add(f"{b}/phi", rng.normal(0.0, scale, (cfg.dim, cfg.dim)))
            params.add(f"{b}/gamma", np.ones(cfg.dim))
            params.add(f"{b}/beta", np.zeros(cfg.dim))
            params.add(f"{b}/mlp/w", rng.normal(0.0, scale, (cfg.dim, cfg.dim)))
            params.add(f"{b}/mlp/b", np.zeros(cfg.dim))
    return params


def context_normalize_var(x: ad.Var) -> ad.Var:
    mu = ad.vmean(x, axis=0, keepdims=True)
    centered = x - mu
    var = ad.vmean(centered * centered, axis=0, keepdims=True)
    return centered / ad.sqrt(var + CN_EPS)


def stream_features_var(
    stream: str,
    points: np.ndarray,
    leaves: dict[str, ad.Var],
    cfg: FeatNetConfig,
    graph: KnnGraph | None = None,
) -> ad.Var:
    """Differentiable feature pipeline for one stream; points enter as constants."""
    if stream not in ("p3", "p2"):
        raise InvalidInputError("stream must be 'p3' or 'p2'")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    expected = 3 if stream == "p3" else 2
    if pts.shape[1] != expected:
        raise InvalidInputError(f"stream {stream} expects {expected}-D points")
    if graph is None:
        graph = knn_graph(pts, min(cfg.knn, pts.shape[0] - 1))
    idx = graph.neighbor_indices

    pre = f"featnet/{stream}"
    x = ad.constant(pts)
    if stream == "p3":
        h = ad.relu(x @ leaves[f"{pre}/align/w1"] + leaves[f"{pre}/align/b1"])
        pooled = ad.vmean(h, axis=0)
        m = ad.reshape(
            pooled @ leaves[f"{pre}/align/w2"] + leaves[f"{pre}/align/b2"], (3, 3)
        ) + ad.constant(np.eye(3))
        x = x @ m

    x = x @ leaves[f"{pre}/lift/w"] + leaves[f"{pre}/lift/b"]
    for blk in range(cfg.blocks):
        b = f"{pre}/block{blk}"
        edge_mean = ad.vmean(ad.gather_rows(x, idx), axis=1) - x
        y = edge_mean @ leaves[f"{b}/theta"] + x @ leaves[f"{b}/phi"]
        y = context_normalize_var(y)
        y = y * leaves[f"{b}/gamma"] + leaves[f"{b}/beta"]
        y = ad.relu(y)
        y = y @ leaves[f"{b}/mlp/w"] + leaves[f"{b}/mlp/b"]
        x = x + y
    return ad.l2_normalize_rows(x)


@dataclass
class ForwardCache:
    """Tape handle produced by `forward`, consumed by `backward`."""

    output: ad.Var
    leaves: dict[str, ad.Var]
    points: np.ndarray


def forward(
    stream: str,
    points: np.ndarray,
    params: ParamStore,
    cfg: FeatNetConfig,
    graph: KnnGraph | None = None,
):
    """Run one stream; returns (descriptors (P,dim), cache for backward).

    Every output row is unit-norm. Non-finite activations raise
    NumericFailureError naming the offending layer.
    """
    leaves = params.leaves()
    out = stream_features_var(stream, points, leaves, cfg, graph=graph)
    if not np.isfinite(out.value).all():
        layer = _first_nonfinite_layer(stream, points, leaves, cfg, graph)
        raise NumericFailureError(f"non-finite activations (first at {layer})")
    return out.value.copy(), ForwardCache(out, leaves, np.asarray(points, dtype=np.float64))


def _first_nonfinite_layer(stream, points, leaves, cfg, graph) -> str:
    # Re-run block by block to localize the failure for the error message.
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if graph is None:
        graph = knn_graph(pts, min(cfg.knn, pts.shape[0] - 1))
    pre = f"featnet/{stream}"
    x = pts
    if stream == "p3":
        hid = np.maximum(pts @ leaves[f"{pre}/align/w1"].value + leaves[f"{pre}/align/b1"].value, 0.0)
        m = (hid.mean(axis=0) @ leaves[f"{pre}/align/w2"].value + leaves[f"{pre}/align/b2"].value).reshape(3, 3) + np.eye(3)
        x = pts @ m
        if not np.isfinite(x).all():
            return "align"
    x = x @ leaves[f"{pre}/lift/w"].value + leaves[f"{pre}/lift/b"].value
    if not np.isfinite(x).all():
        return "lift"
    for blk in range(cfg.blocks):
        b = f"{pre}/block{blk}"
        y = edge_conv(x, graph, leaves[f"{b}/theta"].value, leaves[f"{b}/phi"].value)
        y = context_normalize(y)
        y = y * leaves[f"{b}/gamma"].value + leaves[f"{b}/beta"].value
        y = np.maximum(y, 0.0) @ leaves[f"{b}/mlp/w"].value + leaves[f"{b}/mlp/b"].value
        x = x + y
        if not np.isfinite(x).all():
            return f"block{blk}"
    return "embedding"


def backward(cache: ForwardCache, loss_gradient: np.ndarray):
    """Exact reverse-mode gradients of a cached forward pass.

    Returns (parameter gradients by name, gradient w.r.t. the input points is
    not tracked since points enter as constants).
    """
    if not isinstance(cache, ForwardCache):
        raise ContractViolationError("backward requires the cache returned by forward")
    g = np.asarray(loss_gradient, dtype=np.float64)
    if g.shape != cache.output.value.shape:
        raise ContractViolationError(
            f"loss gradient shape {g.shape} != output shape {cache.output.value.shape}"
        )
    ad.backward(cache.output, g)
    return {
        name: (var.grad if var.grad is not None else np.zeros_like(var.value))
        for name, var in cache.leaves.items()
    }


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: ParamStore):
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.step = 0


def adam_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update in place; deterministic given inputs."""
    for g in grads.values():
        if not np.isfinite(g).all():
            raise NumericFailureError("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, value in params.tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != value.shape:
            raise InvalidInputError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# Checkpoint container ----------------------------------------------------------

_MAGIC = b"BPNT"
_VERSION = 1


def save_checkpoint(path, params: ParamStore, config: dict) -> None:
    """Versioned binary container: JSON header + row-major float64 tensors."""
    header = {
        "format_version": _VERSION,
        "config": config,
        "tensors": [
            {"name": name, "shape": list(v.shape)} for name, v in params.tensors.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ParamStore, config dict); validates magic, version and shapes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise InvalidInputError("not a parameter checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = ParamStore()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise InvalidInputError(f"truncated tensor {entry['name']!r}")
            params.add(entry["name"], np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        trailing = fh.read(1)
        if trailing:
            raise InvalidInputError("trailing bytes after declared tensors")
    return params, header["config"]
