"""Scale-equivariant graph metanetwork over weight graphs.

Features are kept densely per graph layer: vertices ``[N, n_l, D]`` and
edges ``[N, n_l, n_{l-1}, D]`` (``[receiver, sender]``), for a batch of N
networks sharing one architecture. Under a gauge, vertex features of
layer ``l`` scale by ``q_l`` and edge features by ``q_l / q_{l-1}``; every
block below preserves that law.

Building blocks
  scale_inv     rho(canon(x_1), ..., canon(x_k), layer)       invariant
  scale_eq      (sum_i x_i G_i) * scale_inv(...)               equivariant
  rescale_eq    prod_i (x_i G_i)                               scales by prod q_i

``canon`` picks a representative per gauge orbit: sign flip for tanh,
unit norm for relu, and the identity in the symmetry-broken ablation
(which keeps every parameter, so counts match).
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .graph import GraphEncodingSpec, decode_tensors, encode_arrays
from .nets import ArchSpec
from .tensor import Tensor

CHECKPOINT_FORMAT = 1


@dataclass
class MetanetConfig:
    hidden_dim: int = 128
    gnn_layers: int = 4
    dropout: float = 0.0
    symmetry: str = "equivariant"      # "equivariant" | "broken"
    bidirectional: bool = True
    gamma_init: float = 0.01
    activation: str = "tanh"           # gauge group the canonicalization targets
    canon_eps: float | None = None     # None: 1e-12 in float64, 1e-6 in float32
    recip_eps: float | None = None     # squared-norm floor; None: 1e-24 in float64, 1e-8 in float32
    head: str = "operator"             # "operator" | "functional"
    include_io: bool = True            # functional head: append input/output vertex features
    init_scale: float = 1.0
    head_init: float = 1e-2            # output head scale; 0 starts at the identity map

    def __post_init__(self):
        if self.hidden_dim < 1 or self.gnn_layers < 0:
            raise ValueError("hidden_dim must be >= 1 and gnn_layers >= 0")
        if not self.gamma_init > 0:
            raise ValueError("gamma_init must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.symmetry not in ("equivariant", "broken"):
            raise ValueError(f"unknown symmetry mode {self.symmetry!r}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("operator", "functional"):
            raise ValueError(f"unknown head {self.head!r}")

    def eps_for(self, dtype) -> float:
        if self.canon_eps is not None:
            return self.canon_eps
        return 1e-12 if np.dtype(dtype) == np.float64 else 1e-6

    def recip_eps_for(self, dtype) -> float:
        if self.recip_eps is not None:
            return self.recip_eps
        return 1e-24 if np.dtype(dtype) == np.float64 else 1e-8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetanetConfig":
        return cls(**d)


class MetanetParams:
    """Named parameter tensors, in a fixed insertion order."""

    def __init__(self, tensors: "OrderedDict[str, Tensor] | None" = None):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        self.tensors[name] = Tensor(value, requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def layout(self) -> list[dict]:
        out, off = [], 0
        for name, t in self.tensors.items():
            out.append({"name": name, "shape": list(t.shape), "offset": off})
            off += t.size
        return out

    @property
    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])

    def load_vector(self, vec: np.ndarray) -> None:
        off = 0
        for t in self.tensors.values():
            t.data = np.asarray(vec[off:off + t.size], dtype=t.dtype).reshape(t.shape).copy()
            off += t.size

    def astype(self, dtype) -> "MetanetParams":
        return MetanetParams(OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True))
                                         for k, v in self.tensors.items()))

    def copy(self) -> "MetanetParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


# -- graph geometry shared by all blocks -------------------------------

@dataclass(frozen=True)
class _Geometry:
    sizes: tuple
    spec: GraphEncodingSpec
    n_param_layers: int

    @property
    def n_layers(self) -> int:
        return len(self.sizes)

    @classmethod
    def of(cls, arch: ArchSpec) -> "_Geometry":
        return cls(tuple(arch.layer_sizes()), GraphEncodingSpec.for_arch(arch), len(arch.param_layers))


# -- parameter construction --------------------------------------------

def _glorot(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))


def _add_scale_eq(p: MetanetParams, name: str, n_in: int, d: int, n_pos: int, rng, scale: float) -> None:
    for i in range(n_in):
        p.add(f"{name}.G{i}", _glorot(rng, d, d, scale / np.sqrt(n_in)))
    for i in range(n_in):
        p.add(f"{name}.rho.in{i}", _glorot(rng, d, d))
    p.add(f"{name}.rho.pos", rng.normal(0.0, 0.1, size=(n_pos, d)))
    p.add(f"{name}.rho.b1", np.zeros(d))
    p.add(f"{name}.rho.out", _glorot(rng, d, d))
    p.add(f"{name}.rho.b2", np.ones(d))


def _add_rescale_eq(p: MetanetParams, name: str, n_in: int, d: int, rng) -> None:
    for i in range(n_in):
        p.add(f"{name}.G{i}", _glorot(rng, d, d))


def init_metanet(config: MetanetConfig, arch: ArchSpec, seed: int = 0, dtype=np.float32) -> MetanetParams:
    geo = _Geometry.of(arch)
    rng = np.random.default_rng(seed)
    d, L = config.hidden_dim, geo.n_layers
    s = config.init_scale
    p = MetanetParams()
    p.add("init.v", _glorot(rng, geo.spec.d_v, d))
    p.add("init.e", _glorot(rng, geo.spec.d_e, d))
    p.add("init.io", rng.normal(0.0, 1.0, size=(2, d)))
    for t in range(config.gnn_layers):
        _add_rescale_eq(p, f"r{t}.fwd.rs", 2, d, rng)
        _add_scale_eq(p, f"r{t}.fwd.se", 2, d, L, rng, s)
        if config.bidirectional:
            _add_rescale_eq(p, f"r{t}.bwd.rs", 2, d, rng)
            _add_scale_eq(p, f"r{t}.bwd.se", 2, d, L, rng, s)
        _add_scale_eq(p, f"r{t}.updv", 3 if config.bidirectional else 2, d, L, rng, s)
        _add_rescale_eq(p, f"r{t}.upde.rs", 2, d, rng)
        _add_scale_eq(p, f"r{t}.upde.se", 2, d, L, rng, s)
    if config.head == "operator":
        p.add("head.v", _glorot(rng, d, geo.spec.d_v, config.head_init))
        p.add("head.e", _glorot(rng, d, geo.spec.d_e, config.head_init))
        p.add("gamma.W", np.full(geo.n_param_layers, config.gamma_init))
        p.add("gamma.b", np.full(geo.n_param_layers, config.gamma_init))
    else:
        p.add("fn.inner.W1", _glorot(rng, d, d))
        p.add("fn.inner.b1", np.zeros(d))
        p.add("fn.inner.W2", _glorot(rng, d, d))
        p.add("fn.inner.b2", np.zeros(d))
        n_io = (geo.sizes[0] + geo.sizes[-1]) * d if config.include_io else 0
        p.add("fn.outer.W1", _glorot(rng, d + n_io, d))
        p.add("fn.outer.b1", np.zeros(d))
        p.add("fn.outer.W2", _glorot(rng, d, 1))
        p.add("fn.outer.b2", np.zeros(1))
    return p.astype(dtype)


def parameter_count(config: MetanetConfig, arch: ArchSpec) -> int:
    return init_metanet(config, arch, seed=0, dtype=np.float64).num_params


# -- building blocks -----------------------------------------------------

@dataclass
class _Ctx:
    config: MetanetConfig
    params: MetanetParams
    training: bool = False
    rng: np.random.Generator | None = None
    eps: float = 1e-12
    recip_eps: float = 1e-24


def canonicalize(x: Tensor, config: MetanetConfig, eps: float) -> Tensor:
    """Gauge-orbit representative of each feature vector (last axis)."""
    if config.symmetry == "broken":
        return x
    if config.activation == "tanh":
        return T.sign_canon(x, axis=-1)
    return T.canonicalize(x, eps, axis=-1)


def scale_inverse(x: Tensor, config: MetanetConfig, eps: float) -> Tensor:
    """A feature transforming with the reciprocal scale of ``x``.

    Sign gauges are their own inverses, so tanh mode uses ``x`` itself and
    avoids dividing by small features; relu mode uses vector inversion.
    """
    if config.activation == "tanh":
        return x
    return T.recip_norm(x, eps, axis=-1)


def scale_inv(ctx: _Ctx, name: str, xs, layer: int) -> Tensor:
    """rho(canon(x_1), ..., canon(x_k), layer one-hot): Linear, LayerNorm, SiLU, Linear."""
    p = ctx.params
    z = p[f"{name}.rho.pos"][layer] + p[f"{name}.rho.b1"]
    for i, x in enumerate(xs):
        z = T.matmul(canonicalize(x, ctx.config, ctx.eps), p[f"{name}.rho.in{i}"]) + z
    z = T.silu(T.layer_norm(z))
    z = T.dropout(z, ctx.config.dropout, ctx.rng, ctx.training)
    return T.matmul(z, p[f"{name}.rho.out"]) + p[f"{name}.rho.b2"]


def scale_eq(ctx: _Ctx, name: str, xs, layer: int) -> Tensor:
    """(sum_i x_i G_i) * scale_inv(xs): all inputs must share one scale factor."""
    p = ctx.params
    lin = None
    for i, x in enumerate(xs):
        term = T.matmul(x, p[f"{name}.G{i}"])
        lin = term if lin is None else lin + term
    return lin * scale_inv(ctx, name, xs, layer)


def rescale_eq(ctx: _Ctx, name: str, xs) -> Tensor:
    """Elementwise product of per-input linear maps; scales by the product of input scales."""
    p = ctx.params
    out = None
    for i, x in enumerate(xs):
        term = T.matmul(x, p[f"{name}.G{i}"])
        out = term if out is None else out * term
    return out


def init_features(ctx: _Ctx, verts, edges):
    """Bias-free linear lift of raw graph features to the hidden width.

    Input and output vertices additionally receive a learned per-layer
    embedding. Their gauge is always the identity, so this invariant
    channel leaves equivariance intact while giving the multiplicative
    messages a nonzero starting point (raw input features are zero and
    biases are often tiny).
    """
    p = ctx.params
    hv = [T.matmul(v, p["init.v"]) for v in verts]
    hv[0] = hv[0] + p["init.io"][0]
    hv[-1] = hv[-1] + p["init.io"][1]
    he = [T.matmul(e, p["init.e"]) for e in edges]
    return hv, he


def msg_forward(ctx: _Ctx, t: int, h_r: Tensor, h_s: Tensor, e: Tensor, layer: int) -> Tensor:
    """Per-edge messages from senders to receivers; scales like the receiver.

    h_r: [N, n_r, D], h_s: [N, n_s, D], e: [N, n_r, n_s, D] -> [N, n_r, n_s, D].
    """
    rs = rescale_eq(ctx, f"r{t}.fwd.rs", [h_s[:, None], e])
    return scale_eq(ctx, f"r{t}.fwd.se", [h_r[:, :, None], rs], layer)


def msg_backward(ctx: _Ctx, t: int, h_r: Tensor, h_s: Tensor, e: Tensor, layer: int) -> Tensor:
    """Per-edge messages from receivers back to senders; scales like the sender."""
    rs = rescale_eq(ctx, f"r{t}.bwd.rs", [h_r[:, :, None], scale_inverse(e, ctx.config, ctx.recip_eps)])
    return scale_eq(ctx, f"r{t}.bwd.se", [h_s[:, None], rs], layer - 1)


def aggregate(messages: Tensor, axis: int) -> Tensor:
    """Neighbour sum divided by the (fixed) neighbour count.

    Permutation invariant, and the positive constant keeps every scaling
    law; without it feature magnitudes grow with layer width.
    """
    return T.mean(messages, axis=axis)


def upd_v(ctx: _Ctx, t: int, h: Tensor, ms, layer: int) -> Tensor:
    return h + scale_eq(ctx, f"r{t}.updv", [h] + list(ms), layer)


def upd_e(ctx: _Ctx, t: int, h_r: Tensor, h_s: Tensor, e: Tensor, layer: int) -> Tensor:
    inv_s = scale_inverse(h_s, ctx.config, ctx.recip_eps)
    rs = rescale_eq(ctx, f"r{t}.upde.rs", [h_r[:, :, None], inv_s[:, None]])
    return e + scale_eq(ctx, f"r{t}.upde.se", [e, rs], layer)


def message_round(ctx: _Ctx, t: int, hv: list, he: list) -> tuple[list, list]:
    L = len(hv)
    zero = [None] * L
    fwd = list(zero)
    bwd = list(zero)
    for l in range(1, L):
        fwd[l] = aggregate(msg_forward(ctx, t, hv[l], hv[l - 1], he[l - 1], l), axis=2)
        if ctx.config.bidirectional:
            bwd[l - 1] = aggregate(msg_backward(ctx, t, hv[l], hv[l - 1], he[l - 1], l), axis=1)
    new_v = []
    for l in range(L):
        ms = [fwd[l] if fwd[l] is not None else hv[l] * 0.0]
        if ctx.config.bidirectional:
            ms.append(bwd[l] if bwd[l] is not None else hv[l] * 0.0)
        new_v.append(upd_v(ctx, t, hv[l], ms, l))
    new_e = [upd_e(ctx, t, hv[l], hv[l - 1], he[l - 1], l) for l in range(1, L)]
    return new_v, new_e


def _trunk(arch: ArchSpec, theta, config: MetanetConfig, params: MetanetParams, training: bool,
           rng) -> tuple[list, list, _Ctx, bool]:
    dtype = params.dtype
    single = False
    if isinstance(theta, Tensor):
        raw = theta.data
    else:
        raw = np.asarray(theta)
    if raw.ndim == 1:
        single = True
    raw = raw.reshape(-1, raw.shape[-1]).astype(dtype, copy=False)
    spec = GraphEncodingSpec.for_arch(arch)
    verts, edges = encode_arrays(arch, raw, spec)
    ctx = _Ctx(config, params, training, rng, config.eps_for(dtype), config.recip_eps_for(dtype))
    hv, he = init_features(ctx, [Tensor(v) for v in verts], [Tensor(e) for e in edges])
    for t in range(config.gnn_layers):
        hv, he = message_round(ctx, t, hv, he)
    return hv, he, ctx, single


def operator_forward(arch: ArchSpec, theta, config: MetanetConfig, params: MetanetParams,
                     training: bool = False, rng=None) -> Tensor:
    """theta' = theta + gamma * decode(head(GMN(encode(theta)))).

    ``theta`` is ``[P]`` or ``[N, P]``; gradients flow to ``params`` (the
    input parameters are data). Returns a Tensor of the same shape.
    """
    if config.head != "operator":
        raise ValueError("operator_forward needs an operator-head config")
    hv, he, ctx, single = _trunk(arch, theta, config, params, training, rng)
    spec = GraphEncodingSpec.for_arch(arch)
    out_v = [T.matmul(h, params["head.v"]) for h in hv]
    out_e = [T.matmul(e, params["head.e"]) for e in he]
    delta = decode_tensors(arch, out_v, out_e, spec)           # [N, P]
    delta = delta * _gamma_vector(arch, params)
    base = np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=params.dtype)
    out = Tensor(base.reshape(delta.shape)) + delta
    return out.reshape((arch.num_params,)) if single else out


def _gamma_vector(arch: ArchSpec, params: MetanetParams) -> Tensor:
    gw, gb = params["gamma.W"], params["gamma.b"]
    slots = arch.layout()
    parts = []
    for p in range(len(arch.param_layers)):
        nw, nb = slots[2 * p].size, slots[2 * p + 1].size
        ones_w = Tensor(np.ones(nw, dtype=gw.dtype))
        ones_b = Tensor(np.ones(nb, dtype=gb.dtype))
        parts += [ones_w * gw[p], ones_b * gb[p]]
    return T.concat(parts, axis=0)


def functional_forward(arch: ArchSpec, theta, config: MetanetConfig, params: MetanetParams,
                       training: bool = False, rng=None) -> Tensor:
    """Invariant scalar per network: deep-sets readout over canonicalized hidden vertices."""
    if config.head != "functional":
        raise ValueError("functional_forward needs a functional-head config")
    hv, _, ctx, single = _trunk(arch, theta, config, params, training, rng)
    p = params
    pooled = None
    for h in hv[1:-1]:
        z = canonicalize(h, config, ctx.eps)
        z = T.matmul(T.silu(T.matmul(z, p["fn.inner.W1"]) + p["fn.inner.b1"]), p["fn.inner.W2"]) + p["fn.inner.b2"]
        s = T.sum(z, axis=1)
        pooled = s if pooled is None else pooled + s
    if pooled is None:
        n = hv[0].shape[0]
        pooled = Tensor(np.zeros((n, config.hidden_dim), dtype=params.dtype))
    feats = [pooled]
    if config.include_io:
        for h in (hv[0], hv[-1]):
            feats.append(h.reshape((h.shape[0], -1)))
    x = T.concat(feats, axis=-1)
    y = T.matmul(T.silu(T.matmul(x, p["fn.outer.W1"]) + p["fn.outer.b1"]), p["fn.outer.W2"]) + p["fn.outer.b2"]
    y = y.reshape((y.shape[0],))
    return y.reshape(()) if single else y


class Metanet:
    """Config, target architecture and parameters bundled together."""

    def __init__(self, config: MetanetConfig, arch: ArchSpec, params: MetanetParams | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.arch = arch
        self.params = params if params is not None else init_metanet(config, arch, seed, dtype)

    @property
    def num_params(self) -> int:
        return self.params.num_params

    def __call__(self, theta, training: bool = False, rng=None) -> Tensor:
        fn = operator_forward if self.config.head == "operator" else functional_forward
        return fn(self.arch, theta, self.config, self.params, training, rng)

    def zero_head(self) -> None:
        for name in ("head.v", "head.e"):
            self.params[name].data[...] = 0

    def astype(self, dtype) -> "Metanet":
        return Metanet(self.config, self.arch, self.params.astype(dtype))

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "Metanet":
        return load_checkpoint(path)


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path, net: Metanet, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (config, target arch, parameter layout) and ``<path>.bin``.

    The blob is the concatenation of all parameters in layout order as
    little-endian float32.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "<f4",
        "config": net.config.to_dict(),
        "arch": net.arch.to_dict(),
        "num_params": net.num_params,
        "layout": net.params.layout(),
        "blob": path.with_suffix(".bin").name,
        "extra": extra or {},
    }
    blob = path.with_suffix(".bin")
    blob.write_bytes(net.params.to_vector().astype("<f4").tobytes())
    mpath = path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return mpath, blob


def load_checkpoint(path) -> Metanet:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')}")
    config = MetanetConfig.from_dict(manifest["config"])
    arch = ArchSpec.from_dict(manifest["arch"])
    params = init_metanet(config, arch, 0, np.float32)
    if params.layout() != manifest["layout"]:
        raise ValueError(f"{path}: parameter layout does not match its config")
    vec = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f4")
    if vec.size != params.num_params:
        raise ValueError(f"{path}: blob holds {vec.size} values, expected {params.num_params}")
    params.load_vector(vec.astype(np.float32))
    return Metanet(config, arch, params)
