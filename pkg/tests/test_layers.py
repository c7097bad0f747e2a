import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from revsym.layers import (HenonLayer, MlpNet, RealNvpLayer, SympNetActivationModule,
                           SympNetLinearModule, layer_from_dict)
from revsym.reversible import symplectic_J

from conftest import assert_close_rel, fd_grad

J2 = symplectic_J(2)


def zero_mlp(dims):
    return MlpNet(tuple(np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])),
                  tuple(np.zeros(b) for b in dims[1:]))


def make_layers(rng):
    """One random instance of every layer type, with both parities where relevant."""
    return {
        "nvp-even": RealNvpLayer.init(2, 1, False, rng),
        "nvp-odd": RealNvpLayer.init(2, 1, True, rng),
        "nvp-4d": RealNvpLayer.init(4, 2, True, rng, hidden=(5, 6)),
        "henon": HenonLayer(rng.uniform(-1, 1, 4)),
        "sn-linear": SympNetLinearModule.init(1, 8, rng, scale=0.5),
        "sn-linear-2": SympNetLinearModule(2, tuple(np.array([[a, b], [b, c]]) for a, b, c in rng.uniform(-1, 1, (3, 3))),
                                           rng.uniform(-1, 1, 4)),
        "sn-up": SympNetActivationModule(1, rng.uniform(-1, 1, 1), "up"),
        "sn-low": SympNetActivationModule(2, rng.uniform(-1, 1, 2), "low"),
    }


LAYER_NAMES = list(make_layers(np.random.default_rng(0)))


class TestMlp:
    def test_zero_net(self):
        net = zero_mlp([2, 5, 3])
        assert np.array_equal(net.forward(np.ones((4, 2))), np.zeros((4, 3)))

    def test_identity_affine(self, rng):
        net = MlpNet((np.eye(3),), (np.zeros(3),))
        X = rng.normal(size=(5, 3))
        assert np.array_equal(net.forward(X), X)

    def test_glorot_bounds(self, rng):
        net = MlpNet.init([2, 30, 40, 2], rng)
        for W, b in zip(net.weights, net.biases):
            assert np.all(np.abs(W) <= np.sqrt(6 / sum(W.shape)))
            assert np.all(b == 0)
        assert net.n_params == 2 * 30 + 30 + 30 * 40 + 40 + 40 * 2 + 2

    def test_param_gradcheck(self, rng):
        net = MlpNet.init([3, 7, 7, 2], rng)
        net = net.with_params(net.params() + rng.normal(scale=0.1, size=net.n_params))
        X, G = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        _, gth = net.vjp(X, G)
        theta = net.params()
        fd = fd_grad(lambda t: np.sum(G * net.with_params(t).forward(X)), theta, range(net.n_params))
        assert_close_rel(gth, fd, 1e-6)

    def test_jacobian_and_input_vjp(self, rng):
        net = MlpNet.init([2, 9, 2], rng)
        X = rng.normal(size=(3, 2))
        G = rng.normal(size=(3, 2))
        gX, _ = net.vjp(X, G)
        Jm = net.jacobian(X)
        assert np.allclose(gX, np.einsum("bi,bij->bj", G, Jm), atol=1e-14)

    def test_no_inverse(self, rng):
        with pytest.raises(TypeError):
            MlpNet.init([2, 2], rng).vjp(np.zeros((1, 2)), np.zeros((1, 2)), inverse=True)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            MlpNet.init([2, 3, 2], rng).forward(np.zeros((1, 3)))


class TestRealNvp:
    def test_zero_nets_identity(self, rng):
        layer = RealNvpLayer(2, 1, False, zero_mlp([1, 4, 1]), zero_mlp([1, 4, 1]))
        X = rng.normal(size=(10, 2))
        assert np.array_equal(layer.forward(X), X)
        assert np.array_equal(layer.inverse(X), X)
        G = rng.normal(size=(10, 2))
        gX, _ = layer.vjp(X, G)
        assert np.array_equal(gX, G)

    def test_hand_set_translation(self):
        # s = 0 and t(x1) = x1 gives (x1, x2) -> (x1, x2 + x1)
        t = MlpNet((np.ones((1, 1)),), (np.zeros(1),))
        layer = RealNvpLayer(2, 1, False, zero_mlp([1, 1]), t)
        assert np.allclose(layer.forward(np.array([[2.0, 5.0]])), [[2.0, 7.0]], atol=0)

    def test_mask_parity_selects_passive_block(self, rng):
        layer = RealNvpLayer.init(2, 1, True, rng)
        X = rng.normal(size=(4, 2))
        Y = layer.forward(X)
        assert np.array_equal(Y[:, 1], X[:, 1])
        assert not np.allclose(Y[:, 0], X[:, 0])

    def test_round_trip_sweep(self, rng):
        for parity in (False, True):
            layer = RealNvpLayer.init(2, 1, parity, rng)
            X = rng.uniform(-1, 1, (10_000, 2))
            assert np.max(np.abs(layer.inverse(layer.forward(X)) - X)) <= 1e-12

    def test_log_det(self, rng):
        layer = RealNvpLayer.init(4, 2, False, rng, hidden=(8,))
        X = rng.normal(size=(50, 4))
        det = np.linalg.det(layer.jacobian(X))
        assert np.allclose(np.log(det), layer.log_det_jacobian(X), atol=1e-8)


class TestHenon:
    def test_zero_potential_rotation(self, rng):
        layer = HenonLayer(np.zeros(4))
        Z = rng.normal(size=(20, 2))
        W = layer.forward(Z)
        assert np.array_equal(W, np.stack([Z[:, 1], -Z[:, 0]], axis=1))
        assert np.array_equal(layer.inverse(Z), np.stack([-Z[:, 1], Z[:, 0]], axis=1))
        for _ in range(3):
            W = layer.forward(W)
        assert np.max(np.abs(W - Z)) <= 1e-14

    def test_quadratic_potential(self):
        layer = HenonLayer(np.array([0.0, 1.0, 0.0, 0.0]))
        assert np.array_equal(layer.forward(np.array([[1.0, 2.0]])), [[2.0, 3.0]])

    def test_dV_against_power_sum(self, rng):
        a = rng.uniform(-1, 1, 4)
        layer = HenonLayer(a)
        y = rng.uniform(-2, 2, 30)
        expected = sum(k * a[k - 1] * y ** (k - 1) for k in range(1, 5))
        assert np.allclose(layer.dV(y), expected, rtol=0, atol=1e-13)
        expected2 = sum(k * (k - 1) * a[k - 1] * y ** (k - 2) for k in range(2, 5))
        assert np.allclose(layer.d2V(y), expected2, rtol=0, atol=1e-13)

    def test_round_trip_sweep(self, rng):
        layer = HenonLayer(rng.uniform(-1, 1, 4))
        Z = rng.uniform(-1, 1, (10_000, 2))
        assert np.max(np.abs(layer.inverse(layer.forward(Z)) - Z)) <= 1e-13

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(-1, 1)), arrays(np.float64, 2, elements=st.floats(-10, 10)))
    def test_round_trip_near_exact(self, a, z):
        layer = HenonLayer(a)
        back = layer.inverse(layer.forward(z[None]))[0]
        scale = 1 + np.abs(z).max() + np.abs(layer.dV(z[1:]))[0]
        assert np.all(np.abs(back - z) <= 4 * np.finfo(float).eps * scale)

    def test_unit_determinant(self, rng):
        layer = HenonLayer(rng.uniform(-1, 1, 4))
        for inv in (False, True):
            assert np.allclose(np.linalg.det(layer.jacobian(rng.normal(size=(50, 2)), inv)), 1.0, atol=1e-13)

    def test_invalid(self):
        with pytest.raises(ValueError):
            HenonLayer(np.zeros(4), dim_half=2)
        with pytest.raises(ValueError):
            HenonLayer(np.zeros(0))


class TestSympNet:
    def test_zero_identity(self, rng):
        lin = SympNetLinearModule(1, tuple(np.zeros((1, 1)) for _ in range(8)), np.zeros(2))
        act = SympNetActivationModule(1, np.zeros(1), "up")
        Z = rng.normal(size=(10, 2))
        assert np.array_equal(lin.forward(Z), Z)
        assert np.array_equal(act.forward(Z), Z)

    def test_single_up_sublayer(self):
        lin = SympNetLinearModule(1, (np.array([[2.0]]),), np.zeros(2))
        assert np.array_equal(lin.forward(np.array([[1.0, 1.0]])), [[3.0, 1.0]])

    def test_low_sublayer_follows_up(self):
        lin = SympNetLinearModule(1, (np.zeros((1, 1)), np.array([[2.0]])), np.array([0.5, -0.5]))
        assert np.array_equal(lin.forward(np.array([[1.0, 1.0]])), [[1.5, 2.5]])

    def test_activation_hand_values(self):
        up = SympNetActivationModule(1, np.array([2.0]), "up")
        low = SympNetActivationModule(1, np.array([2.0]), "low")
        z = np.array([[0.3, -0.7]])
        assert np.allclose(up.forward(z), [[0.3 + 2 * np.tanh(-0.7), -0.7]], atol=1e-15)
        assert np.allclose(low.forward(z), [[0.3, -0.7 + 2 * np.tanh(0.3)]], atol=1e-15)

    def test_matrix_matches_forward(self, rng):
        lin = SympNetLinearModule.init(2, 8, rng, scale=0.5)
        lin = SympNetLinearModule(2, lin.sublayers, np.zeros(4))
        Z = rng.normal(size=(5, 4))
        assert np.allclose(lin.forward(Z), Z @ lin.matrix().T, atol=1e-13)
        assert np.allclose(lin.matrix(inverse=True) @ lin.matrix(), np.eye(4), atol=1e-12)

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            SympNetLinearModule(2, (np.array([[0.0, 1.0], [0.0, 0.0]]),), np.zeros(4))
        with pytest.raises(ValueError):
            SympNetActivationModule(1, np.zeros(1), "sideways")


@pytest.mark.parametrize("name", LAYER_NAMES)
class TestEveryLayer:
    def test_inverse_exactness(self, name, rng):
        layer = make_layers(rng)[name]
        X = rng.uniform(-1, 1, (10_000, layer.dim))
        assert np.max(np.abs(layer.inverse(layer.forward(X)) - X)) <= 1e-12
        assert np.max(np.abs(layer.forward(layer.inverse(X)) - X)) <= 1e-12

    @pytest.mark.parametrize("inverse", [False, True])
    def test_vjp_gradcheck(self, name, inverse, rng):
        layer = make_layers(rng)[name]
        d = layer.dim
        X, G = rng.uniform(-1, 1, (4, d)), rng.normal(size=(4, d))
        apply = (lambda l, x: l.inverse(x)) if inverse else (lambda l, x: l.forward(x))
        gX, gth = layer.vjp(X, G, inverse=inverse)
        theta = layer.params()
        fd_th = fd_grad(lambda t: np.sum(G * apply(layer.with_params(t), X)), theta, range(len(theta)))
        assert_close_rel(gth, fd_th, 1e-6)
        flat = X.ravel()
        fd_x = fd_grad(lambda v: np.sum(G * apply(layer, v.reshape(X.shape))), flat, range(flat.size))
        assert_close_rel(gX.ravel(), fd_x, 1e-6)

    @pytest.mark.parametrize("inverse", [False, True])
    def test_jacobian_matches_vjp(self, name, inverse, rng):
        layer = make_layers(rng)[name]
        X = rng.uniform(-1, 1, (5, layer.dim))
        G = rng.normal(size=X.shape)
        gX, _ = layer.vjp(X, G, inverse=inverse)
        assert np.allclose(gX, np.einsum("bi,bij->bj", G, layer.jacobian(X, inverse)), atol=1e-12)

    def test_zero_upstream(self, name, rng):
        layer = make_layers(rng)[name]
        X = rng.normal(size=(3, layer.dim))
        for inv in (False, True):
            gX, gth = layer.vjp(X, np.zeros_like(X), inverse=inv)
            assert not np.any(gX) and not np.any(gth)

    def test_serialization_round_trip(self, name, rng):
        layer = make_layers(rng)[name]
        back = layer_from_dict(layer.to_dict())
        assert type(back) is type(layer)
        assert np.array_equal(back.params(), layer.params())
        X = rng.normal(size=(3, layer.dim))
        assert np.array_equal(back.forward(X), layer.forward(X))

    def test_with_params_round_trip(self, name, rng):
        layer = make_layers(rng)[name]
        theta = layer.params()
        assert theta.size == layer.n_params
        assert np.array_equal(layer.with_params(theta).params(), theta)

    def test_dimension_mismatch(self, name, rng):
        layer = make_layers(rng)[name]
        with pytest.raises(ValueError):
            layer.forward(np.zeros((2, layer.dim + 1)))


@pytest.mark.parametrize("name", ["henon", "sn-linear", "sn-linear-2", "sn-up", "sn-low"])
def test_symplectic_layers(name, rng):
    layer = make_layers(rng)[name]
    d = layer.dim
    Jd = symplectic_J(d)
    Z = rng.uniform(-2, 2, (1000, d))
    for inv in (False, True):
        M = layer.jacobian(Z, inv)
        res = np.abs(np.einsum("bji,jk,bkl->bil", M, Jd, M) - Jd).max()
        assert res <= 1e-10


def test_realnvp_not_symplectic(rng):
    layer = RealNvpLayer.init(2, 1, False, rng)
    layer = layer.with_params(layer.params() + rng.normal(size=layer.n_params))
    M = layer.jacobian(rng.normal(size=(100, 2)))
    assert np.abs(np.einsum("bji,jk,bkl->bil", M, J2, M) - J2).max() > 1e-2


def test_unknown_layer_type():
    with pytest.raises(ValueError):
        layer_from_dict({"type": "conv"})
