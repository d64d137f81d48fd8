import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amortgmn import gauge, graph, nets
from amortgmn.gauge import GaugeError, GaugeTransform, ScalingSpace
from amortgmn.nets import LayerSpec


def small_cnn(act="relu"):
    layers = (LayerSpec("conv2d", 1, 3, (3, 3), 1, 0), LayerSpec("conv2d", 3, 2, (2, 2), 2, 0),
              LayerSpec("global_avg_pool"), LayerSpec("dense", 2, 4))
    return nets.ArchSpec((1, 9, 9), layers, 4, act)


def test_identity_is_noop(rng):
    arch = nets.mlp_arch([4, 5, 3])
    theta = rng.normal(size=arch.num_params)
    psi = GaugeTransform.identity(arch.layer_sizes())
    assert np.array_equal(gauge.apply_to_params(psi, arch, theta), theta)
    g = graph.encode(arch, theta)
    g2 = gauge.apply_to_graph(psi, g)
    assert all(np.array_equal(a, b) for a, b in zip(g.edge_features, g2.edge_features))
    assert gauge.function_preserved(arch, theta, psi, rng.normal(size=(5, 4))) == 0.0


def test_swap_two_neurons(rng):
    arch = nets.mlp_arch([3, 4, 2])
    theta = rng.normal(size=arch.num_params)
    psi = GaugeTransform.identity(arch.layer_sizes())
    psi.perms[1] = np.array([1, 0, 2, 3])
    (w1, b1), (w2, b2) = nets.unflatten(arch, gauge.apply_to_params(psi, arch, theta))
    (v1, c1), (v2, c2) = nets.unflatten(arch, theta)
    assert np.array_equal(w1, v1[[1, 0, 2, 3]]) and np.array_equal(b1, c1[[1, 0, 2, 3]])
    assert np.array_equal(w2, v2[:, [1, 0, 2, 3]]) and np.array_equal(b2, c2)


def test_single_sign_flip_on_graph(rng):
    arch = nets.mlp_arch([3, 4, 2], "tanh")
    g = graph.encode(arch, rng.normal(size=arch.num_params))
    psi = GaugeTransform.identity(arch.layer_sizes())
    psi.scales[1][2] = -1.0
    g2 = gauge.apply_to_graph(psi, g, "tanh")
    assert np.array_equal(g2.vertex_features[1][2], -g.vertex_features[1][2])
    assert np.array_equal(g2.edge_features[0][2], -g.edge_features[0][2])
    assert np.array_equal(g2.edge_features[1][:, 2], -g.edge_features[1][:, 2])
    mask = np.ones(4, bool)
    mask[2] = False
    assert np.array_equal(g2.edge_features[1][:, mask], g.edge_features[1][:, mask])


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_function_preserved_mlp_zoo(act):
    arch = nets.mlp_zoo_arch(act)
    rng = np.random.default_rng(1)
    for _ in range(5):
        theta = rng.normal(size=arch.num_params) * 0.3
        psi = gauge.sample_gauge(arch, act, rng)
        assert gauge.function_preserved(arch, theta, psi, rng.random((64,) + arch.input_shape)) <= 1e-12


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_function_preserved_cnn(act):
    arch = small_cnn(act)
    rng = np.random.default_rng(2)
    for _ in range(5):
        theta = rng.normal(size=arch.num_params)
        psi = gauge.sample_gauge(arch, act, rng)
        assert gauge.function_preserved(arch, theta, psi, rng.random((16,) + arch.input_shape)) <= 1e-10


def test_illegal_gauge_breaks_function(rng):
    arch = nets.mlp_arch([6, 8, 3], "relu")
    psi = GaugeTransform.identity(arch.layer_sizes())
    psi.scales[1] = -np.ones(8)
    with pytest.raises(GaugeError):
        gauge.apply_to_params(psi, arch, np.zeros(arch.num_params), "relu")
    devs = [gauge.function_preserved(arch, rng.normal(size=arch.num_params), psi, rng.normal(size=(16, 6)))
            for _ in range(10)]
    assert min(devs) > 1e-3


def test_validation_errors():
    psi = GaugeTransform.identity((2, 3, 2))
    psi.scales[1][0] = 0.0
    with pytest.raises(GaugeError):
        psi.validate()
    psi = GaugeTransform.identity((2, 3, 2))
    psi.scales[1][0] = 0.5
    with pytest.raises(GaugeError):
        psi.validate("tanh")
    psi = GaugeTransform.identity((2, 3, 2))
    psi.perms[1] = np.array([0, 0, 1])
    with pytest.raises(GaugeError):
        psi.validate()
    psi = GaugeTransform.identity((2, 3, 2))
    psi.perms[2] = np.array([1, 0])
    with pytest.raises(GaugeError):
        psi.validate()


def test_sampling_constraints_and_reproducibility():
    arch = nets.mlp_zoo_arch()
    t = gauge.sample_gauge(arch, "tanh", 5)
    assert all(np.all(np.abs(q) == 1) for q in t.scales)
    r = gauge.sample_gauge(arch, "relu", 5)
    assert all(np.all(q > 0) for q in r.scales)
    assert all(np.all((q >= 0.1) & (q <= 10)) for q in r.scales)
    r2 = gauge.sample_gauge(arch, "relu", 5)
    assert all(np.array_equal(a, b) for a, b in zip(r.perms + r.scales, r2.perms + r2.scales))
    cnn = nets.cnn_zoo_arch()
    c = gauge.sample_gauge(cnn, "tanh", 0)
    assert c.layer_sizes == (1, 16, 16, 16, 10)


def test_sign_sampling_is_roughly_uniform():
    signs = np.concatenate([gauge.sample_gauge((1, 100, 1), "tanh", s).scales[1] for s in range(50)])
    assert abs(np.mean(signs > 0) - 0.5) < 0.03


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["tanh", "relu"]), st.booleans())
def test_commuting_square(seed, act, conv):
    rng = np.random.default_rng(seed)
    arch = small_cnn(act) if conv else nets.mlp_arch([3, 5, 4, 2], act)
    theta = rng.normal(size=arch.num_params)
    psi = gauge.sample_gauge(arch, act, rng)
    a = graph.encode(arch, gauge.apply_to_params(psi, arch, theta, act))
    b = gauge.apply_to_graph(psi, graph.encode(arch, theta), act)
    assert all(np.array_equal(x, y) for x, y in zip(a.vertex_features, b.vertex_features))
    assert all(np.array_equal(x, y) for x, y in zip(a.edge_features, b.edge_features))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["tanh", "relu"]))
def test_group_laws(seed, act):
    rng = np.random.default_rng(seed)
    arch = nets.mlp_arch([3, 6, 5, 2], act)
    theta = rng.normal(size=arch.num_params)
    p1, p2 = gauge.sample_gauge(arch, act, rng), gauge.sample_gauge(arch, act, rng)
    two_step = gauge.apply_to_params(p2, arch, gauge.apply_to_params(p1, arch, theta))
    composed = gauge.apply_to_params(p2.compose(p1), arch, theta)
    assert np.max(np.abs(two_step - composed)) <= 1e-12 * max(1.0, np.max(np.abs(composed)))
    back = gauge.apply_to_params(p1.inverse(), arch, gauge.apply_to_params(p1, arch, theta))
    assert np.max(np.abs(back - theta)) <= 1e-12
    p2.compose(p1).validate(act)


def test_lemma_mlp_all_signs():
    s = gauge.admissible_scalings_bruteforce(ScalingSpace.mlp(3, 4, "tanh"))
    assert s.count == 128 and s.dimension == 7


def test_lemma_cnn_uniform_signs():
    space = ScalingSpace.cnn((3, 3), (2, 2))
    assert (space.rows, space.cols) == (4, 9)
    s = gauge.admissible_scalings_bruteforce(space)
    assert s.count == 4 and s.uniform_only and s.effective_dimension == 1
    for a in (-1, 1):
        for b in (-1, 1):
            assert s.contains([a] * 4 + [b] * 9)


def test_lemma_cnn_relu_uniform_only():
    s = gauge.admissible_scalings_bruteforce(ScalingSpace.cnn((3, 3), (2, 2), activation="relu"))
    assert s.uniform_only and s.count == len(gauge.RELU_GRID) ** 2
    assert np.all(s.patterns > 0)


def test_lemma_verdict_strict_subset():
    v = gauge.lemma_check(ScalingSpace.cnn((3, 3), (2, 2)))
    assert v.contained and v.strict_subset
    assert v.cnn.count < 2 ** 13


def test_bruteforce_rejects_large_spaces():
    with pytest.raises(ValueError):
        gauge.admissible_scalings_bruteforce(ScalingSpace.mlp(8, 8, "tanh"))


def test_gauge_dimension():
    assert gauge.gauge_dimension(nets.mlp_zoo_arch()) == 160
    assert gauge.gauge_dimension(nets.cnn_zoo_arch()) == 48
    assert gauge.gauge_dimension(nets.mlp_arch([3, 2])) == 5
