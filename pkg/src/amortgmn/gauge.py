"""Permutation and scaling gauges of target networks.

A gauge assigns every graph layer a permutation ``perm`` and a nonzero
scale per vertex ``scale``; the input and output layers are pinned to the
identity. Applied to parameters it maps vertex ``i`` of a hidden layer to
``scale[perm[i]] * bias[perm[i]]`` and edge ``(r, s)`` to
``scale_l[perm_l[r]] * W[perm_l[r], perm_k[s]] / scale_k[perm_k[s]]``.
Conv layers get one scale per channel, replicated over spatial positions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .graph import WeightGraph
from .nets import ArchSpec, LayerSpec


class GaugeError(ValueError):
    pass


@dataclass
class GaugeTransform:
    perms: list     # per graph layer, int arrays
    scales: list    # per graph layer, float arrays (one entry per vertex / channel)

    @property
    def layer_sizes(self) -> tuple:
        return tuple(len(p) for p in self.perms)

    @classmethod
    def identity(cls, sizes) -> "GaugeTransform":
        return cls([np.arange(n) for n in sizes], [np.ones(n) for n in sizes])

    def validate(self, activation: str | None = None) -> None:
        if len(self.perms) != len(self.scales):
            raise GaugeError("perms and scales differ in length")
        for l, (p, q) in enumerate(zip(self.perms, self.scales)):
            if sorted(p.tolist()) != list(range(len(p))) or len(q) != len(p):
                raise GaugeError(f"layer {l}: permutation is not a bijection of {len(p)} vertices")
            if np.any(q == 0):
                raise GaugeError(f"layer {l}: zero scale")
        for l in (0, len(self.perms) - 1):
            if not (np.array_equal(self.perms[l], np.arange(len(self.perms[l]))) and np.all(self.scales[l] == 1)):
                raise GaugeError("input and output layers must carry the identity gauge")
        if activation == "tanh" and any(np.any(np.abs(q) != 1) for q in self.scales):
            raise GaugeError("tanh gauges only allow scales in {-1, +1}")
        if activation == "relu" and any(np.any(q <= 0) for q in self.scales):
            raise GaugeError("relu gauges only allow strictly positive scales")

    def compose(self, first: "GaugeTransform") -> "GaugeTransform":
        """The gauge equal to applying ``first`` and then ``self``."""
        perms, scales = [], []
        for p2, q2, p1, q1 in zip(self.perms, self.scales, first.perms, first.scales):
            perms.append(p1[p2])
            scales.append(q1 * q2[np.argsort(p1)])
        return GaugeTransform(perms, scales)

    def inverse(self) -> "GaugeTransform":
        return GaugeTransform([np.argsort(p) for p in self.perms],
                              [1.0 / q[p] for p, q in zip(self.perms, self.scales)])


def _transform_block(x: np.ndarray, pr, qr, ps=None, qs=None) -> np.ndarray:
    """Apply receiver (and optionally sender) gauges to the first axes of ``x``."""
    out = x[pr] * qr[pr].reshape((-1,) + (1,) * (x.ndim - 1))
    if ps is not None:
        out = out[:, ps] / qs[ps].reshape((1, -1) + (1,) * (x.ndim - 2))
    return out


def _check_compatible(psi: GaugeTransform, sizes) -> None:
    if psi.layer_sizes != tuple(sizes):
        raise GaugeError(f"gauge layer sizes {psi.layer_sizes} do not match {tuple(sizes)}")


def apply_to_params(psi: GaugeTransform, arch: ArchSpec, theta, activation: str | None = None) -> np.ndarray:
    _check_compatible(psi, arch.layer_sizes())
    psi.validate(activation or arch.activation)
    theta = np.asarray(theta)
    new = []
    for p, (w, b) in enumerate(nets.unflatten(arch, theta)):
        r, s = p + 1, p
        new.append((_transform_block(w, psi.perms[r], psi.scales[r], psi.perms[s], psi.scales[s]),
                    _transform_block(b, psi.perms[r], psi.scales[r])))
    return nets.flatten(arch, new)


def apply_to_graph(psi: GaugeTransform, g: WeightGraph, activation: str | None = None) -> WeightGraph:
    _check_compatible(psi, g.layer_sizes)
    psi.validate(activation)
    verts = [_transform_block(v, psi.perms[l], psi.scales[l]) for l, v in enumerate(g.vertex_features)]
    edges = [_transform_block(e, psi.perms[l], psi.scales[l], psi.perms[l - 1], psi.scales[l - 1])
             for l, e in enumerate(g.edge_features, start=1)]
    return WeightGraph(tuple(g.layer_sizes), verts, edges, g.spec)


def sample_gauge(arch_or_sizes, activation: str, seed=None, permute: bool = True,
                 scale: bool = True) -> GaugeTransform:
    """Uniform permutations; uniform signs (tanh) or log-uniform scales in [0.1, 10] (relu)."""
    sizes = arch_or_sizes.layer_sizes() if isinstance(arch_or_sizes, ArchSpec) else list(arch_or_sizes)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    psi = GaugeTransform.identity(sizes)
    for l in range(1, len(sizes) - 1):
        n = sizes[l]
        if permute:
            psi.perms[l] = rng.permutation(n)
        if scale:
            if activation == "tanh":
                psi.scales[l] = rng.choice([-1.0, 1.0], size=n)
            elif activation == "relu":
                psi.scales[l] = np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=n))
            else:
                raise GaugeError(f"unknown activation {activation!r}")
    return psi


def function_preserved(arch: ArchSpec, theta, psi: GaugeTransform, inputs) -> float:
    """Max over inputs of the logit deviation between ``theta`` and ``psi(theta)``.

    Deliberately skips the activation legality check so illegal gauges can
    be measured too.
    """
    _check_compatible(psi, arch.layer_sizes())
    psi.validate(None)
    theta = np.asarray(theta, dtype=np.float64)
    moved = np.asarray(apply_to_params(psi, arch, theta, activation="any"))
    pix = np.asarray(inputs, dtype=np.float64)
    a = nets.forward(arch, theta, pix).data
    b = nets.forward(arch, moved, pix).data
    return float(np.max(np.abs(a - b)))


# -- admissible scalings of a single layer ---------------------------

@dataclass(frozen=True)
class ScalingSpace:
    """A single layer's weight space together with its gauge constraint.

    ``kind="mlp"`` is the unconstrained ``rows x cols`` matrix space; for
    ``kind="cnn"`` the matrix is the Toeplitz form of ``conv`` on an input of
    extent ``input_hw`` (one feature map) and the bias is shared by all rows.
    """

    kind: str
    rows: int = 0
    cols: int = 0
    activation: str = "tanh"
    conv: LayerSpec | None = None
    input_hw: tuple | None = None
    include_bias: bool = True

    @classmethod
    def mlp(cls, rows: int, cols: int, activation: str = "tanh", include_bias: bool = True):
        return cls("mlp", rows, cols, activation, include_bias=include_bias)

    @classmethod
    def cnn(cls, input_hw, kernel=(2, 2), stride: int = 1, padding: int = 0, activation: str = "tanh",
            include_bias: bool = True):
        layer = LayerSpec("conv2d", 1, 1, tuple(kernel), stride, padding)
        oh, ow = nets.conv_output_hw(input_hw, kernel, stride, padding)
        return cls("cnn", oh * ow, input_hw[0] * input_hw[1], activation, layer, tuple(input_hw), include_bias)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("scaling space dimensions must be positive")

    def groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Shared-parameter group of every weight cell (-1: structural zero) and every bias entry."""
        if self.kind == "mlp":
            cells = np.arange(self.rows * self.cols).reshape(self.rows, self.cols)
            bias = self.rows * self.cols + np.arange(self.rows)
        else:
            cells = nets.toeplitz_support(self.conv, self.input_hw)
            bias = np.full(self.rows, cells.max() + 1)
        return cells, bias

    def label(self) -> str:
        if self.kind == "mlp":
            return f"MLP {self.rows}x{self.cols}"
        c = self.conv
        return (f"CNN {self.input_hw[0]}x{self.input_hw[1]} k{c.kernel[0]}x{c.kernel[1]} "
                f"s{c.stride} p{c.padding} ({self.rows}x{self.cols})")


RELU_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class AdmissibleSet:
    space: ScalingSpace
    patterns: np.ndarray            # [K, rows + cols]: row scales then column scales
    candidates: tuple
    dimension: int
    effective_dimension: int
    searched: int = 0
    notes: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.patterns)

    def contains(self, pattern) -> bool:
        return bool(np.any(np.all(np.isclose(self.patterns, np.asarray(pattern)), axis=1)))

    @property
    def uniform_only(self) -> bool:
        r = self.space.rows
        return bool(np.all(self.patterns[:, :r] == self.patterns[:, :1])
                    and np.all(self.patterns[:, r:] == self.patterns[:, r:r + 1]))


def _class_samples(space: ScalingSpace, n_samples: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cells, bias = space.groups()
    n_groups = int(max(cells.max(), bias.max())) + 1
    vals = rng.uniform(0.5, 2.0, size=(n_samples, n_groups)) * rng.choice([-1.0, 1.0], size=(n_samples, n_groups))
    w = np.where(cells >= 0, vals[:, np.maximum(cells, 0)], 0.0)
    return w, vals[:, bias], cells


def _preserves(space, a, b, w, bias_vals, cells, bias_groups, rows_done, cols_done) -> bool:
    """Structure test on the assigned block: every shared group keeps equal values."""
    wr = w[:, :rows_done, :cols_done] * a[None, :rows_done, None] / b[None, None, :cols_done]
    gr = cells[:rows_done, :cols_done]
    vals = [wr[:, gr == g] for g in np.unique(gr[gr >= 0])]
    if space.include_bias:
        br = bias_vals[:, :rows_done] * a[None, :rows_done]
        bg = bias_groups[:rows_done]
        vals += [br[:, bg == g] for g in np.unique(bg)]
    for v in vals:
        if v.shape[1] > 1 and not np.allclose(v, v[:, :1], rtol=1e-9, atol=0.0):
            return False
    return True


def admissible_scalings_bruteforce(space: ScalingSpace, n_samples: int = 5, seed: int = 0,
                                   grid=RELU_GRID, max_candidates: int = 2_000_000) -> AdmissibleSet:
    """Enumerate diagonal scaling pairs that keep the layer inside its structure class.

    Candidates are all sign patterns (tanh) or all points of a positive log
    grid (relu) for the ``rows + cols`` diagonal entries. A pair is
    admissible iff ``Q_out W Q_in^{-1}`` (and ``Q_out b``) stays in the class
    for every one of ``n_samples`` random class members. The enumeration is
    exhaustive but prunes a branch as soon as the rows and columns assigned
    so far already break a shared group.
    """
    n, m = space.rows, space.cols
    if n + m > 14 and space.activation == "tanh":
        raise ValueError(f"{n + m} diagonal entries exceed the exhaustive sign limit of 14")
    values = (-1.0, 1.0) if space.activation == "tanh" else tuple(float(v) for v in grid)
    if space.kind == "mlp" and len(values) ** (n + m) > max_candidates:
        raise ValueError(f"{len(values)}^{n + m} candidates exceed the enumeration limit")
    rng = np.random.default_rng(seed)
    w, bias_vals, cells = _class_samples(space, n_samples, rng)
    _, bias_groups = space.groups()

    found = []
    searched = 0
    a = np.ones(n)
    b = np.ones(m)

    def assign_rows(i):
        nonlocal searched
        if i == n:
            assign_cols(0)
            return
        for v in values:
            a[i] = v
            searched += 1
            if _preserves(space, a, b, w, bias_vals, cells, bias_groups, i + 1, 0):
                assign_rows(i + 1)

    def assign_cols(j):
        nonlocal searched
        if j == m:
            found.append(np.concatenate([a, b]))
            return
        for v in values:
            b[j] = v
            searched += 1
            if _preserves(space, a, b, w, bias_vals, cells, bias_groups, n, j + 1):
                assign_cols(j + 1)

    assign_rows(0)
    patterns = np.array(found)
    dim, eff = _dimensions(space, patterns, cells)
    return AdmissibleSet(space, patterns, values, dim, eff, searched)


def _dimensions(space: ScalingSpace, patterns: np.ndarray, cells: np.ndarray) -> tuple[int, int]:
    n = space.rows
    rr, cc = np.nonzero(cells >= 0)
    if space.activation == "tanh":
        dim = int(round(math.log2(len(patterns))))
        actions = {tuple(p[rr] * p[n + cc]) for p in patterns}
        return dim, int(round(math.log2(len(actions))))
    logs = np.log(patterns)
    centered = logs - logs[0]
    dim = int(np.linalg.matrix_rank(centered)) if len(patterns) > 1 else 0
    action = logs[:, rr] - logs[:, n + cc]
    eff = int(np.linalg.matrix_rank(action - action[0])) if len(patterns) > 1 else 0
    return dim, eff


def is_admissible(space: ScalingSpace, pattern, n_samples: int = 5, seed: int = 0) -> bool:
    pattern = np.asarray(pattern, dtype=float)
    n, m = space.rows, space.cols
    rng = np.random.default_rng(seed)
    w, bias_vals, cells = _class_samples(space, n_samples, rng)
    _, bias_groups = space.groups()
    return _preserves(space, pattern[:n], pattern[n:], w, bias_vals, cells, bias_groups, n, m)


@dataclass
class LemmaVerdict:
    cnn: AdmissibleSet
    mlp_count: int | None
    contained: bool
    witness: np.ndarray | None

    @property
    def strict_subset(self) -> bool:
        return self.contained and self.witness is not None


def lemma_check(cnn_space: ScalingSpace, seed: int = 0) -> LemmaVerdict:
    """Check that the CNN-admissible scalings form a strict subset of the MLP ones.

    Containment is checked member by member against the MLP space of the
    same shape; strictness by exhibiting an MLP-admissible pattern that the
    CNN structure rejects.
    """
    mlp_space = ScalingSpace.mlp(cnn_space.rows, cnn_space.cols, cnn_space.activation, cnn_space.include_bias)
    cnn = admissible_scalings_bruteforce(cnn_space, seed=seed)
    contained = all(is_admissible(mlp_space, p, seed=seed) for p in cnn.patterns)
    mlp_count = None
    k = len(cnn.candidates)
    if k ** (mlp_space.rows + mlp_space.cols) <= 1 << 14:
        mlp_count = admissible_scalings_bruteforce(mlp_space, seed=seed).count
    witness = None
    rng = np.random.default_rng(seed)
    for trial in itertools.count():
        if trial > 1000:
            break
        cand = rng.choice(cnn.candidates, size=cnn_space.rows + cnn_space.cols)
        if trial == 0:
            cand = np.ones(cnn_space.rows + cnn_space.cols)
            cand[0] = cnn.candidates[0] if cnn.candidates[0] != 1.0 else cnn.candidates[-1]
        if is_admissible(mlp_space, cand, seed=seed) and not is_admissible(cnn_space, cand, seed=seed):
            witness = cand
            break
    return LemmaVerdict(cnn, mlp_count, contained, witness)


def gauge_dimension(arch: ArchSpec, activation: str | None = None) -> int:
    """Degrees of scaling gauge freedom of a whole network.

    MLPs: hidden neurons plus inputs. CNNs: hidden channels summed over
    layers. A single parametric layer falls back to the per-layer count
    ``n_in + n_out``. For tanh this counts independent sign choices.
    """
    params = arch.param_layers
    if len(params) == 1:
        return params[0].n_in + params[0].n_out
    sizes = arch.layer_sizes()
    if arch.is_cnn:
        return sum(l.n_out for l in params if l.kind == "conv2d")
    return sizes[0] + sum(sizes[1:-1])
