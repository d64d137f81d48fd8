"""Small MLP/CNN target networks over flat parameter vectors.

Weights follow the ``x_l = act(W_l x_{l-1} + b_l)`` convention: a dense
weight is stored ``(out, in)`` and a conv kernel ``(out, in, kh, kw)``,
each followed by its bias, layer after layer. The activation is applied
after every parametric layer except the last, which emits logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("tanh", "relu")


class LayoutError(ValueError):
    """Parameter vector does not match the architecture layout."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv2d" | "global_avg_pool"
    n_in: int = 0
    n_out: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "global_avg_pool"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            kh, kw = self.kernel
            if kh < 1 or kw < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d needs kernel >= 1, stride >= 1, padding >= 0")

    @property
    def has_params(self) -> bool:
        return self.kind != "global_avg_pool"

    @property
    def kernel_area(self) -> int:
        return self.kernel[0] * self.kernel[1] if self.kind == "conv2d" else 1

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv2d":
            return (self.n_out, self.n_in) + tuple(self.kernel)
        return (self.n_out, self.n_in)

    @property
    def reasonable(self) -> bool:
        """Stride no larger than the kernel, so neighbouring outputs share inputs."""
        return self.kind != "conv2d" or self.stride <= min(self.kernel)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out,
                "kernel": list(self.kernel), "stride": self.stride, "padding": self.padding}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], d.get("n_in", 0), d.get("n_out", 0), tuple(d.get("kernel", (1, 1))),
                   d.get("stride", 1), d.get("padding", 0))


def conv_output_hw(input_hw, kernel, stride: int, padding: int) -> tuple[int, int]:
    h, w = input_hw
    kh, kw = kernel
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive conv output extent for input {input_hw}, kernel {kernel}")
    return oh, ow


@dataclass(frozen=True)
class Slot:
    layer: int          # index into ArchSpec.layers
    param_layer: int    # index among parametric layers
    name: str           # "W" or "b"
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple          # (C, H, W)
    layers: tuple
    num_classes: int
    activation: str = "tanh"
    name: str = "custom"
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.shapes()  # validates composition

    def shapes(self) -> list[tuple]:
        """Activation shape after each layer (input shape first)."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                if int(np.prod(shape)) != layer.n_in:
                    raise ValueError(f"layer {i}: dense expects {layer.n_in} inputs, gets {shape}")
                shape = (layer.n_out,)
            elif layer.kind == "conv2d":
                if len(shape) != 3 or shape[0] != layer.n_in:
                    raise ValueError(f"layer {i}: conv expects {layer.n_in} channels, gets {shape}")
                shape = (layer.n_out,) + conv_output_hw(shape[1:], layer.kernel, layer.stride, layer.padding)
            else:
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: global_avg_pool needs a feature map")
                shape = (shape[0],)
            out.append(shape)
        if shape != (self.num_classes,):
            raise ValueError(f"network output {shape} does not match {self.num_classes} classes")
        return out

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.has_params]

    @property
    def is_cnn(self) -> bool:
        return any(l.kind == "conv2d" for l in self.layers)

    def layout(self) -> list[Slot]:
        slots, offset, p = [], 0, 0
        for i, layer in enumerate(self.layers):
            if not layer.has_params:
                continue
            for name, shape in (("W", layer.weight_shape), ("b", (layer.n_out,))):
                slots.append(Slot(i, p, name, offset, shape))
                offset += int(np.prod(shape))
            p += 1
        return slots

    @property
    def num_params(self) -> int:
        slots = self.layout()
        return slots[-1].offset + slots[-1].size

    def layer_sizes(self) -> list[int]:
        """Vertex counts per graph layer: input channels/features, then each parametric layer."""
        first = self.layers[0]
        n0 = self.input_shape[0] if first.kind == "conv2d" else int(np.prod(self.input_shape))
        return [n0] + [l.n_out for l in self.param_layers]

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "activation": self.activation, "layers": [l.to_dict() for l in self.layers],
                "metadata": dict(self.metadata)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                   d["num_classes"], d.get("activation", "tanh"), d.get("name", "custom"),
                   dict(d.get("metadata", {})))


def mlp_arch(widths: Sequence[int], activation: str = "tanh", input_shape=None, name: str = "mlp") -> ArchSpec:
    widths = list(widths)
    if input_shape is None:
        input_shape = (1, 8, 8) if widths[0] == 64 else (widths[0],)
    layers = tuple(LayerSpec("dense", a, b) for a, b in zip(widths[:-1], widths[1:]))
    return ArchSpec(tuple(input_shape), layers, widths[-1], activation, name)


def mlp_zoo_arch(activation: str = "tanh") -> ArchSpec:
    """64 -> 48 -> 32 -> 16 -> 10 over flattened 8x8 grayscale images."""
    return mlp_arch([64, 48, 32, 16, 10], activation, (1, 8, 8), "mlp-zoo")


def cnn_zoo_arch(activation: str = "tanh") -> ArchSpec:
    """Three 16-filter 3x3 convs, global average pooling, dense head.

    Kernel size is pinned by the 4,970-parameter total; stride 2 without
    padding reproduces the 32 -> 15 -> 7 -> 3 feature-map extents.
    """
    layers = (
        LayerSpec("conv2d", 1, 16, (3, 3), 2, 0),
        LayerSpec("conv2d", 16, 16, (3, 3), 2, 0),
        LayerSpec("conv2d", 16, 16, (3, 3), 2, 0),
        LayerSpec("global_avg_pool"),
        LayerSpec("dense", 16, 10),
    )
    return ArchSpec((1, 32, 32), layers, 10, activation, "cnn-zoo",
                    {"kernel": "3x3", "stride": 2, "padding": 0, "input": "1x32x32"})


# -- parameter vectors -------------------------------------------------

@dataclass
class ParamVector:
    values: np.ndarray
    arch: ArchSpec

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape[-1] != self.arch.num_params:
            raise LayoutError(f"expected {self.arch.num_params} parameters, got {self.values.shape[-1]}")

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.arch, self.values)

    @classmethod
    def flatten(cls, arch: ArchSpec, params) -> "ParamVector":
        return cls(flatten(arch, params), arch)


def unflatten(arch: ArchSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    theta = np.asarray(theta)
    if theta.shape[-1] != arch.num_params:
        raise LayoutError(f"expected {arch.num_params} parameters, got {theta.shape[-1]}")
    lead = theta.shape[:-1]
    slots = arch.layout()
    out = []
    for w, b in zip(slots[::2], slots[1::2]):
        out.append((theta[..., w.offset:w.offset + w.size].reshape(lead + w.shape),
                    theta[..., b.offset:b.offset + b.size].reshape(lead + b.shape)))
    return out


def flatten(arch: ArchSpec, params) -> np.ndarray:
    parts = []
    for (w, b), layer in zip(params, arch.param_layers):
        w = np.asarray(w)
        b = np.asarray(b)
        lead = w.shape[:w.ndim - len(layer.weight_shape)]
        parts += [w.reshape(lead + (-1,)), b.reshape(lead + (-1,))]
    theta = np.concatenate(parts, axis=-1)
    if theta.shape[-1] != arch.num_params:
        raise LayoutError("parameter list does not match the architecture")
    return theta


def init_params(arch: ArchSpec, rng: np.random.Generator, kind: str = "xavier-normal",
                variance: float = 0.1) -> np.ndarray:
    """Random parameter vector; biases start at zero.

    ``variance`` sets the spread of the plain ``normal`` and
    ``truncated-normal`` kinds; the fan-based kinds use their usual scale.
    """
    params = []
    for layer in arch.param_layers:
        shape = layer.weight_shape
        fan_in = layer.n_in * layer.kernel_area
        fan_out = layer.n_out * layer.kernel_area
        if kind == "xavier-normal":
            w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), shape)
        elif kind == "he-normal":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif kind == "orthogonal":
            flat = rng.normal(size=(layer.n_out, fan_in))
            if flat.shape[0] < flat.shape[1]:
                q, r = np.linalg.qr(flat.T)
                q = (q * np.sign(np.diag(r))).T
            else:
                q, r = np.linalg.qr(flat)
                q = q * np.sign(np.diag(r))
            w = q.reshape(shape)
        elif kind == "normal":
            w = rng.normal(0.0, np.sqrt(variance), shape)
        elif kind == "truncated-normal":
            std = np.sqrt(variance)
            w = rng.normal(0.0, std, shape)
            bad = np.abs(w) > 2 * std
            while bad.any():
                w[bad] = rng.normal(0.0, std, bad.sum())
                bad = np.abs(w) > 2 * std
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        params.append((w, np.zeros(layer.n_out)))
    return flatten(arch, params)


# -- forward -----------------------------------------------------------

def _activation(name: str):
    return T.tanh if name == "tanh" else T.relu


def _im2col_index(input_hw, kernel, stride: int, padding: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = input_hw[0] + 2 * padding, input_hw[1] + 2 * padding
    kh, kw = kernel
    oh, ow = conv_output_hw(input_hw, kernel, stride, padding)
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    rows = oy.reshape(-1, 1) * stride + ky.reshape(1, -1)
    cols = ox.reshape(-1, 1) * stride + kx.reshape(1, -1)
    return (rows * w + cols).reshape(-1), (oh, ow)


def _conv2d(h: Tensor, w: Tensor, b: Tensor, layer: LayerSpec, lead: tuple) -> Tensor:
    """h: [*lead, B, C, H, W]; w: [*lead, O, C, kh, kw]; b: [*lead, O]."""
    h = T.pad2d(h, layer.padding)
    *front, c, hh, ww = h.shape
    idx, (oh, ow) = _im2col_index((hh - 2 * layer.padding, ww - 2 * layer.padding),
                                  layer.kernel, layer.stride, layer.padding)
    k = layer.kernel_area
    cols = T.gather(h.reshape(tuple(front) + (c, hh * ww)), idx)              # [..., B, C, P*K]
    cols = cols.reshape(tuple(front) + (c, oh * ow, k))
    nf = len(front)
    cols = T.transpose(cols, tuple(range(nf)) + (nf + 1, nf, nf + 2))          # [..., B, P, C, K]
    cols = cols.reshape(tuple(front) + (oh * ow, c * k))
    wm = w.reshape(lead + (1, layer.n_out, c * k)).swapaxes(-1, -2)           # [*lead, 1, CK, O]
    out = T.matmul(cols, wm) + b.reshape(lead + (1, 1, layer.n_out))         # [..., B, P, O]
    out = out.swapaxes(-1, -2)
    return out.reshape(tuple(front) + (layer.n_out, oh, ow))


def forward(arch: ArchSpec, theta, pixels) -> Tensor:
    """Logits of the network(s) ``theta`` on a batch of images.

    ``theta`` is ``[P]`` or ``[N, P]`` (N networks sharing the architecture);
    ``pixels`` is ``[B, C, H, W]``. Returns ``[B, classes]`` or
    ``[N, B, classes]``. Differentiable in ``theta``.
    """
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    if theta.shape[-1] != arch.num_params:
        raise LayoutError(f"expected {arch.num_params} parameters, got {theta.shape[-1]}")
    lead = theta.shape[:-1]
    x = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels)
    x = x.astype(theta.dtype, copy=False)
    if x.shape[1:] != arch.input_shape:
        raise LayoutError(f"input shape {x.shape[1:]} does not match {arch.input_shape}")
    h = Tensor(x.reshape((1,) * len(lead) + x.shape))
    act = _activation(arch.activation)
    slots = arch.layout()
    p = 0
    n_param = len(arch.param_layers)
    for layer in arch.layers:
        if layer.kind == "global_avg_pool":
            h = T.mean(h, axis=(-2, -1))
            continue
        ws, bs = slots[2 * p], slots[2 * p + 1]
        w = theta[..., ws.offset:ws.offset + ws.size].reshape(lead + ws.shape)
        b = theta[..., bs.offset:bs.offset + bs.size].reshape(lead + bs.shape)
        if layer.kind == "dense":
            if h.ndim > len(lead) + 2:
                h = h.reshape(h.shape[:len(lead) + 1] + (-1,))
            h = T.matmul(h, w.swapaxes(-1, -2)) + b.reshape(lead + (1, layer.n_out))
        else:
            h = _conv2d(h, w, b, layer, lead)
        p += 1
        if p < n_param:
            h = act(h)
    if not lead:
        h = h.reshape(h.shape[-2:])
    return h


def predict(arch: ArchSpec, theta, pixels) -> np.ndarray:
    with T.no_grad():
        return forward(arch, np.asarray(theta), pixels).data.argmax(axis=-1)


def accuracy(arch: ArchSpec, theta, pixels, labels) -> float | np.ndarray:
    pred = predict(arch, theta, pixels)
    return (pred == np.asarray(labels)).mean(axis=-1)


# -- matrix (Toeplitz) view of convolutions ---------------------------

def toeplitz_support(layer: LayerSpec, input_hw) -> np.ndarray:
    """Kernel index (row-major in the kernel) at each cell of the conv matrix, -1 where empty."""
    if layer.kind != "conv2d":
        raise ValueError("toeplitz_support needs a conv2d layer")
    h, w = input_hw
    kh, kw = layer.kernel
    s, p = layer.stride, layer.padding
    oh, ow = conv_output_hw(input_hw, layer.kernel, s, p)
    support = np.full((oh * ow, h * w), -1, dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            row = oy * ow + ox
            for ky in range(kh):
                for kx in range(kw):
                    iy, ix = oy * s + ky - p, ox * s + kx - p
                    if 0 <= iy < h and 0 <= ix < w:
                        support[row, iy * w + ix] = ky * kw + kx
    return support


def toeplitz_matrix(layer: LayerSpec, kernel, input_hw) -> np.ndarray:
    """Doubly-block Toeplitz matrix M with ``vec(conv(x)) = M @ vec(x)`` (single channel pair)."""
    kernel = np.asarray(kernel, dtype=float).reshape(-1)
    if kernel.size != layer.kernel_area:
        raise ValueError("kernel size does not match the layer")
    support = toeplitz_support(layer, input_hw)
    return np.where(support >= 0, kernel[np.maximum(support, 0)], 0.0)


def conv_matrix(layer: LayerSpec, weight, input_hw) -> np.ndarray:
    """Multichannel conv as a block matrix of per-channel-pair Toeplitz blocks (channel-major)."""
    weight = np.asarray(weight, dtype=float)
    blocks = [[toeplitz_matrix(layer, weight[o, i], input_hw) for i in range(layer.n_in)]
              for o in range(layer.n_out)]
    return np.block(blocks)


def shares_rows(m: np.ndarray, out_hw=None) -> bool:
    """Whether neighbouring rows of a conv matrix overlap in a kernel position.

    Rows are neighbours when their output locations are adjacent on the
    output grid ``out_hw`` (consecutive rows when no grid is given). Integer
    input is read as a support map from :func:`toeplitz_support`, anything
    else by its nonzero pattern. A single-row matrix shares nothing.
    """
    m = np.asarray(m)
    support = m >= 0 if m.dtype.kind in "iu" else m != 0
    n = support.shape[0]
    if n < 2:
        return False
    if out_hw is None:
        pairs = [(i, i + 1) for i in range(n - 1)]
    else:
        oh, ow = out_hw
        pairs = [(y * ow + x, y * ow + x + 1) for y in range(oh) for x in range(ow - 1)]
        pairs += [(y * ow + x, (y + 1) * ow + x) for y in range(oh - 1) for x in range(ow)]
    return all(bool((support[a] & support[b]).any()) for a, b in pairs)
