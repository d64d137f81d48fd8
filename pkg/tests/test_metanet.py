import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amortgmn import gauge, nets
from amortgmn import metanet as M
from amortgmn import tensor as T
from amortgmn.nets import LayerSpec
from amortgmn.tensor import Tensor

from helpers import numeric_grad, rel_err


def cfg(act="tanh", sym="equivariant", head="operator", **kw):
    kw.setdefault("hidden_dim", 6)
    kw.setdefault("gnn_layers", 2)
    return M.MetanetConfig(activation=act, symmetry=sym, head=head, **kw)


def probe(act="tanh", sym="equivariant", head="operator"):
    """Random operator with an O(1) update: the default head starts near the identity map."""
    return cfg(act, sym, head, gamma_init=1.0, head_init=1.0)


def small_cnn(act):
    layers = (LayerSpec("conv2d", 1, 3, (3, 3), 1, 0), LayerSpec("conv2d", 3, 2, (2, 2), 2, 0),
              LayerSpec("global_avg_pool"), LayerSpec("dense", 2, 3))
    return nets.ArchSpec((1, 8, 8), layers, 3, act)


def op_dev(arch, config, params, theta, psi):
    a = M.operator_forward(arch, gauge.apply_to_params(psi, arch, theta), config, params).data
    b = gauge.apply_to_params(psi, arch, M.operator_forward(arch, theta, config, params).data)
    return np.max(np.abs(a - b))


def test_blocks_scaling_laws(rng):
    """scale_inv is invariant, scale_eq equivariant, rescale_eq multiplicative."""
    for act in ("tanh", "relu"):
        c = cfg(act)
        p = M.MetanetParams()
        d = 5
        for name in ("se",):
            M._add_scale_eq(p, name, 2, d, 3, rng, 1.0)
        M._add_rescale_eq(p, "rs", 2, d, rng)
        p = p.astype(np.float64)
        ctx = M._Ctx(c, p, eps=1e-12)
        x1, x2 = rng.normal(size=(4, d)), rng.normal(size=(4, d))
        q = rng.choice([-1.0, 1.0], size=(4, 1)) if act == "tanh" else np.exp(rng.normal(size=(4, 1)))
        inv0 = M.scale_inv(ctx, "se", [Tensor(x1), Tensor(x2)], 1).data
        inv1 = M.scale_inv(ctx, "se", [Tensor(q * x1), Tensor(q * x2)], 1).data
        assert np.max(np.abs(inv0 - inv1)) <= 1e-12
        eq0 = M.scale_eq(ctx, "se", [Tensor(x1), Tensor(x2)], 1).data
        eq1 = M.scale_eq(ctx, "se", [Tensor(q * x1), Tensor(q * x2)], 1).data
        assert np.max(np.abs(q * eq0 - eq1)) <= 1e-12 * max(1, np.abs(eq1).max())
        q2 = np.abs(q) + 0.5
        rs0 = M.rescale_eq(ctx, "rs", [Tensor(x1), Tensor(x2)]).data
        rs1 = M.rescale_eq(ctx, "rs", [Tensor(q * x1), Tensor(q2 * x2)]).data
        assert np.allclose(q * q2 * rs0, rs1, rtol=1e-12, atol=1e-14)
        inv = M.scale_inverse(Tensor(q * x1), c, 1e-24).data
        assert np.allclose(inv, M.scale_inverse(Tensor(x1), c, 1e-24).data / q, rtol=1e-12, atol=1e-14)


def test_zero_head_is_identity(rng):
    arch = nets.mlp_arch([5, 4, 3])
    net = M.Metanet(cfg(), arch, seed=0, dtype=np.float64)
    net.zero_head()
    theta = rng.normal(size=arch.num_params)
    assert np.array_equal(net(theta).data, theta)


def test_batched_matches_single(rng):
    arch = nets.mlp_arch([5, 4, 3])
    net = M.Metanet(cfg(), arch, seed=0, dtype=np.float64)
    thetas = rng.normal(size=(3, arch.num_params))
    batch = net(thetas).data
    for i in range(3):
        assert np.allclose(batch[i], net(thetas[i]).data, atol=1e-13)


@pytest.mark.parametrize("act", ["tanh", "relu"])
@pytest.mark.parametrize("conv", [False, True], ids=["mlp", "cnn"])
def test_operator_equivariance(act, conv):
    rng = np.random.default_rng(11)
    arch = small_cnn(act) if conv else nets.mlp_arch([5, 6, 4, 3], act)
    c = probe(act)
    params = M.init_metanet(c, arch, 3, np.float64)
    for _ in range(5):
        theta = rng.normal(size=arch.num_params)
        psi = gauge.sample_gauge(arch, act, rng)
        assert op_dev(arch, c, params, theta, psi) <= 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_operator_permutation_equivariance_any_mode(seed):
    """Permutations are respected even by the symmetry-broken configuration."""
    rng = np.random.default_rng(seed)
    arch = nets.mlp_arch([4, 5, 3, 2], "relu")
    c = probe("relu", "broken")
    params = M.init_metanet(c, arch, seed % 100, np.float64)
    psi = gauge.sample_gauge(arch, "relu", rng, scale=False)
    assert op_dev(arch, c, params, rng.normal(size=arch.num_params), psi) <= 1e-10


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_broken_mode_violates_equivariance(act):
    rng = np.random.default_rng(5)
    arch = nets.mlp_arch([5, 6, 4, 3], act)
    c = probe(act, "broken")
    params = M.init_metanet(c, arch, 3, np.float64)
    devs = [op_dev(arch, c, params, rng.normal(size=arch.num_params), gauge.sample_gauge(arch, act, rng))
            for _ in range(10)]
    assert np.mean(np.array(devs) > 1e-3) >= 0.9


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_parameter_parity(act):
    arch = nets.mlp_zoo_arch(act)
    for head in ("operator", "functional"):
        a = M.parameter_count(cfg(act, "equivariant", head), arch)
        b = M.parameter_count(cfg(act, "broken", head), arch)
        assert a == b > 0


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_functional_invariance(act):
    rng = np.random.default_rng(9)
    arch = nets.mlp_arch([5, 6, 4, 3], act)
    c = cfg(act, head="functional")
    params = M.init_metanet(c, arch, 2, np.float64)
    for _ in range(5):
        theta = rng.normal(size=arch.num_params)
        y = M.functional_forward(arch, theta, c, params).item()
        perm = gauge.sample_gauge(arch, act, rng, scale=False)
        assert M.functional_forward(arch, gauge.apply_to_params(perm, arch, theta), c, params).item() == pytest.approx(y, abs=1e-12)
        psi = gauge.sample_gauge(arch, act, rng)
        assert abs(M.functional_forward(arch, gauge.apply_to_params(psi, arch, theta), c, params).item() - y) <= 1e-10


def test_relu_invariance_with_zero_biases():
    """Zero biases give tiny hidden features; the reciprocal floor must stay below them."""
    rng = np.random.default_rng(3)
    arch = nets.mlp_arch([16, 12, 8, 10], "relu", (1, 4, 4))
    for head in ("operator", "functional"):
        c = probe("relu", head=head) if head == "operator" else cfg("relu", head=head)
        params = M.init_metanet(c, arch, 1, np.float64)
        for _ in range(5):
            theta = nets.init_params(arch, rng, "xavier-normal")
            psi = gauge.sample_gauge(arch, "relu", rng)
            a = M.Metanet(c, arch, params)(gauge.apply_to_params(psi, arch, theta)).data
            b = M.Metanet(c, arch, params)(theta).data
            if head == "operator":
                b = gauge.apply_to_params(psi, arch, b)
            assert np.max(np.abs(a - b)) <= 1e-10


def test_head_mismatch_raises():
    arch = nets.mlp_arch([3, 2])
    with pytest.raises(ValueError):
        M.operator_forward(arch, np.zeros(arch.num_params), cfg(head="functional"),
                           M.init_metanet(cfg(head="functional"), arch))
    with pytest.raises(ValueError):
        M.MetanetConfig(gamma_init=0.0)
    with pytest.raises(ValueError):
        M.MetanetConfig(symmetry="none")


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_gradient_matches_finite_differences(act):
    rng = np.random.default_rng(4)
    arch = nets.mlp_arch([4, 5, 3], act)
    c = cfg(act, hidden_dim=4)
    params = M.init_metanet(c, arch, 0, np.float64)
    for name in ("head.v", "head.e"):
        params[name].data[...] = rng.normal(size=params[name].shape) * 0.3
    thetas = rng.normal(size=(2, arch.num_params))
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)

    def loss_of(vec):
        params.load_vector(vec)
        out = M.operator_forward(arch, thetas, c, params)
        logits = nets.forward(arch, out, x)
        return T.mean(T.cross_entropy(logits, y)) + 1e-2 * T.mean(T.l1_norm(out, axis=-1))

    base = params.to_vector()
    for t in params.parameters():
        t.grad = None
    T.backward(loss_of(base))
    grad = np.concatenate([t.grad.reshape(-1) for t in params.parameters()])
    probe = rng.choice(base.size, 10, replace=False)

    def f(sub):
        v = base.copy()
        v[probe] = sub
        with T.no_grad():
            return loss_of(v).item()
    num = numeric_grad(f, base[probe].copy())
    params.load_vector(base)
    assert rel_err(grad[probe], num) <= 1e-3


def test_dropout_only_in_training(rng):
    arch = nets.mlp_arch([4, 5, 3])
    net = M.Metanet(cfg(dropout=0.5), arch, seed=0, dtype=np.float64)
    th = rng.normal(size=arch.num_params)
    assert np.array_equal(net(th).data, net(th).data)
    a = net(th, training=True, rng=np.random.default_rng(0)).data
    b = net(th, training=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


def test_checkpoint_round_trip(tmp_path, rng):
    arch = nets.cnn_zoo_arch()
    net = M.Metanet(cfg(), arch, seed=1)
    M.save_checkpoint(tmp_path / "net", net, {"note": 1})
    back = M.load_checkpoint(tmp_path / "net")
    assert back.config == net.config and back.arch == arch
    assert np.array_equal(back.params.to_vector(), net.params.to_vector())
    assert back.params.to_vector().tobytes() == net.params.to_vector().tobytes()
    th = rng.normal(size=arch.num_params).astype(np.float32)
    assert np.array_equal(back(th).data, net(th).data)


def test_checkpoint_rejects_wrong_size(tmp_path):
    arch = nets.mlp_arch([3, 2])
    M.save_checkpoint(tmp_path / "n", M.Metanet(cfg(), arch))
    blob = tmp_path / "n.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ValueError):
        M.load_checkpoint(tmp_path / "n")


def test_float32_path_is_finite(rng):
    arch = nets.mlp_zoo_arch()
    net = M.Metanet(M.MetanetConfig(hidden_dim=8, gnn_layers=2), arch, seed=0)
    out = net(nets.init_params(arch, rng).astype(np.float32)[None].repeat(2, 0))
    assert out.dtype == np.float32 and np.all(np.isfinite(out.data))
