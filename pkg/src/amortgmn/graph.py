"""Codec between parameter vectors and weight graphs.

Biases become vertex features and weights become edge features. Each edge
feature is a flattened ``h_max x w_max`` grid (row-major): a conv kernel
occupies the top-left ``kh x kw`` block, a dense weight sits alone in the
center cell ``(h_max // 2) * w_max + w_max // 2``. Input vertices carry
zero features.

Graph layer ``l`` holds ``n_l`` vertices; edges of layer ``l`` run from
every vertex of layer ``l-1`` (sender) to every vertex of layer ``l``
(receiver) and are stored densely as ``[n_l, n_{l-1}, d_e]``, i.e. indexed
``[receiver, sender]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nets import ArchSpec, LayoutError
from .tensor import Tensor


@dataclass(frozen=True)
class GraphEncodingSpec:
    h_max: int = 1
    w_max: int = 1
    d_v: int = 1

    def __post_init__(self):
        if self.h_max < 1 or self.w_max < 1:
            raise ValueError("padded kernel extents must be >= 1")

    @property
    def d_e(self) -> int:
        return self.h_max * self.w_max

    @property
    def center(self) -> int:
        return (self.h_max // 2) * self.w_max + self.w_max // 2

    @classmethod
    def for_arch(cls, arch: ArchSpec) -> "GraphEncodingSpec":
        kh = max(l.kernel[0] if l.kind == "conv2d" else 1 for l in arch.param_layers)
        kw = max(l.kernel[1] if l.kind == "conv2d" else 1 for l in arch.param_layers)
        return cls(kh, kw)


@dataclass
class WeightGraph:
    """Dense per-layer storage plus flat vertex/edge views."""

    layer_sizes: tuple
    vertex_features: list      # per graph layer: [n_l, d_v]
    edge_features: list        # per edge layer l = 1..L: [n_l, n_{l-1}, d_e]
    spec: GraphEncodingSpec

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def num_vertices(self) -> int:
        return int(sum(self.layer_sizes))

    def layer_ranges(self) -> list[tuple[int, int]]:
        starts = np.concatenate([[0], np.cumsum(self.layer_sizes)])
        return [(int(a), int(b)) for a, b in zip(starts[:-1], starts[1:])]

    def vertices(self) -> tuple[np.ndarray, np.ndarray]:
        """(layer index per vertex, features [V, d_v])."""
        layer = np.repeat(np.arange(self.num_layers), self.layer_sizes)
        return layer, np.concatenate(self.vertex_features, axis=0)

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(sender ids, receiver ids, features [E, d_e]) with global vertex ids."""
        ranges = self.layer_ranges()
        senders, receivers, feats = [], [], []
        for l in range(1, self.num_layers):
            r0, s0 = ranges[l][0], ranges[l - 1][0]
            n_r, n_s = self.layer_sizes[l], self.layer_sizes[l - 1]
            rr, ss = np.meshgrid(np.arange(n_r), np.arange(n_s), indexing="ij")
            receivers.append(rr.reshape(-1) + r0)
            senders.append(ss.reshape(-1) + s0)
            feats.append(self.edge_features[l - 1].reshape(-1, self.spec.d_e))
        return np.concatenate(senders), np.concatenate(receivers), np.concatenate(feats, axis=0)

    def copy(self) -> "WeightGraph":
        return WeightGraph(tuple(self.layer_sizes), [v.copy() for v in self.vertex_features],
                           [e.copy() for e in self.edge_features], self.spec)


def _check_fits(arch: ArchSpec, spec: GraphEncodingSpec) -> None:
    for layer in arch.param_layers:
        if layer.kind == "conv2d" and (layer.kernel[0] > spec.h_max or layer.kernel[1] > spec.w_max):
            raise ValueError(f"kernel {layer.kernel} exceeds padded grid ({spec.h_max}, {spec.w_max})")


def encode_arrays(arch: ArchSpec, theta: np.ndarray, spec: GraphEncodingSpec | None = None):
    """Batched encode: ``theta [..., P]`` -> (vertex list, edge list) of ndarrays."""
    spec = spec or GraphEncodingSpec.for_arch(arch)
    _check_fits(arch, spec)
    theta = np.asarray(theta)
    if theta.shape[-1] != arch.num_params:
        raise LayoutError(f"expected {arch.num_params} parameters, got {theta.shape[-1]}")
    lead = theta.shape[:-1]
    sizes = arch.layer_sizes()
    slots = arch.layout()
    verts = [np.zeros(lead + (sizes[0], spec.d_v), dtype=theta.dtype)]
    edges = []
    for p, layer in enumerate(arch.param_layers):
        ws, bs = slots[2 * p], slots[2 * p + 1]
        w = theta[..., ws.offset:ws.offset + ws.size].reshape(lead + ws.shape)
        b = theta[..., bs.offset:bs.offset + bs.size]
        e = np.zeros(lead + (layer.n_out, layer.n_in, spec.h_max, spec.w_max), dtype=theta.dtype)
        if layer.kind == "conv2d":
            kh, kw = layer.kernel
            e[..., :kh, :kw] = w
        else:
            e[..., spec.h_max // 2, spec.w_max // 2] = w
        edges.append(e.reshape(lead + (layer.n_out, layer.n_in, spec.d_e)))
        verts.append(b[..., None].copy())
    return verts, edges


def encode(arch: ArchSpec, theta, spec: GraphEncodingSpec | None = None) -> WeightGraph:
    spec = spec or GraphEncodingSpec.for_arch(arch)
    theta = np.asarray(getattr(theta, "values", theta))
    if theta.ndim != 1:
        raise LayoutError("encode takes a single parameter vector")
    verts, edges = encode_arrays(arch, theta, spec)
    return WeightGraph(tuple(arch.layer_sizes()), verts, edges, spec)


def decode_tensors(arch: ArchSpec, verts, edges, spec: GraphEncodingSpec) -> Tensor:
    """Differentiable decode of (possibly batched) graph features into ``[..., P]``.

    Only the valid cells are read: the center cell for dense edges and the
    top-left kernel block for conv edges; padding cells are ignored.
    """
    parts = []
    for p, layer in enumerate(arch.param_layers):
        e = edges[p]
        v = verts[p + 1]
        lead = e.shape[:-3]
        if e.shape[-3:] != (layer.n_out, layer.n_in, spec.d_e) or v.shape[-2:] != (layer.n_out, spec.d_v):
            raise LayoutError(f"graph layer {p + 1} does not match the architecture")
        if layer.kind == "conv2d":
            kh, kw = layer.kernel
            grid = e.reshape(lead + (layer.n_out, layer.n_in, spec.h_max, spec.w_max))
            w = grid[..., :kh, :kw].reshape(lead + (-1,))
        else:
            w = e[..., spec.center].reshape(lead + (-1,))
        parts += [w, v[..., 0]]
    return T.concat(parts, axis=-1)


def decode(arch: ArchSpec, g: WeightGraph) -> np.ndarray:
    if tuple(g.layer_sizes) != tuple(arch.layer_sizes()):
        raise LayoutError("graph topology does not match the architecture")
    with T.no_grad():
        out = decode_tensors(arch, [Tensor(v) for v in g.vertex_features],
                             [Tensor(e) for e in g.edge_features], g.spec)
    return out.data


def layer_positional_encoding(g_or_sizes) -> np.ndarray:
    """One-hot graph-layer index per vertex, ``[V, num_layers]``."""
    sizes = g_or_sizes.layer_sizes if isinstance(g_or_sizes, WeightGraph) else tuple(g_or_sizes)
    layer = np.repeat(np.arange(len(sizes)), sizes)
    return np.eye(len(sizes))[layer]
