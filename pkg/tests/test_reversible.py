from dataclasses import replace

import numpy as np
import pytest

from revsym.layers import HenonLayer, MlpNet
from revsym.reversible import (Involution, Kind, Model, StructureError, build_model, identity_model,
                               inverse_residual, param_count, parse_kind, reversibility_residual,
                               symplectic_J, symplecticity_residual)

from conftest import assert_close_rel, fd_grad

KINDS = ["nn", "r", "hr", "sn"]
# a 50-fold polynomial composition overflows once coefficients reach a few hundredths
SPREADS = {"r": (0.0, 0.05, 0.3), "sn": (0.0, 0.05, 0.3), "hr": (0.0, 0.005, 0.01)}
# Hénon stacks are used with |x / c| <= 1/2; twice the largest region coordinate keeps them there
HR_SCALE = 1.3


def perturbed(kind, seed, spread=None, **kw):
    """A model whose parameters sit away from initialization."""
    if kind == "hr":
        kw.setdefault("scale", HR_SCALE)
    m = build_model(kind, seed=seed, **kw)
    if spread is None:
        spread = SPREADS.get(kind, (0.0, 0.05))[1]
    rng = np.random.default_rng(seed + 100)
    return m.with_params(m.params() + rng.normal(scale=spread, size=m.n_params))


def region_points(rng, n=1000):
    return rng.uniform([-0.45, -0.45], [0.65, 0.45], (n, 2))


class TestInvolution:
    def test_momentum_flip(self):
        R = Involution.momentum_flip(4)
        assert np.array_equal(R.matrix, np.diag([1.0, 1, -1, -1]))
        assert R.antisymplectic

    def test_rejects_non_involution(self):
        with pytest.raises(ValueError):
            Involution(np.array([[0.0, 2.0], [1.0, 0.0]]))

    def test_rejects_symplectic_when_anti_claimed(self):
        with pytest.raises(ValueError):
            Involution(np.eye(2), antisymplectic=True)

    def test_swap_is_antisymplectic(self):
        Involution(np.array([[0.0, 1.0], [1.0, 0.0]]), antisymplectic=True)

    def test_J(self):
        assert np.array_equal(symplectic_J(2), [[0, 1], [-1, 0]])
        with pytest.raises(ValueError):
            symplectic_J(3)


class TestKinds:
    @pytest.mark.parametrize("alias,kind", [("nn", Kind.MLP_BASELINE), ("R", Kind.REVERSIBLE_NVP),
                                            ("hr", Kind.REVERSIBLE_HENON), ("sympnet", Kind.SYMPNET)])
    def test_parse(self, alias, kind):
        assert parse_kind(alias) is kind

    def test_parse_unknown(self):
        with pytest.raises(ValueError):
            parse_kind("transformer")

    def test_param_counts(self):
        counts = {k: param_count(build_model(k)) for k in KINDS}
        assert counts["hr"] == 100
        assert abs(counts["nn"] - 5000) <= 250
        # each NVP layer has two 1-16-1 nets: 2 * (16 + 16 + 16 + 1)
        assert counts["r"] == 6 * 2 * 49
        # 19 linear modules of 8 scalars + bias, 18 activation scales
        assert counts["sn"] == 19 * 10 + 18
        assert param_count(identity_model()) == 0

    def test_structure_rejected(self):
        with pytest.raises(StructureError):
            Model(Kind.REVERSIBLE_HENON, 2, (MlpNet.init([2, 2], np.random.default_rng(0)),),
                  Involution.momentum_flip())
        with pytest.raises(StructureError):
            Model(Kind.REVERSIBLE_HENON, 2, (HenonLayer(np.zeros(4)),))
        with pytest.raises(StructureError):
            Model(Kind.MLP_BASELINE, 2, ())
        with pytest.raises(StructureError):
            build_model("hr", scale=0.0)

    def test_deterministic_init(self):
        for k in KINDS:
            assert np.array_equal(build_model(k, seed=3).params(), build_model(k, seed=3).params())
            assert not np.array_equal(build_model(k, seed=3).params(), build_model(k, seed=4).params())

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            build_model("r").forward(np.zeros((2, 3)))


class TestEvaluation:
    def test_identity_model(self, rng):
        X = rng.normal(size=(10, 2))
        m = identity_model()
        assert np.array_equal(m.forward(X), X)
        assert np.array_equal(m.inverse(X), X)
        assert reversibility_residual(m, X) == 0.0
        assert symplecticity_residual(m, X) == 0.0

    def test_one_zero_henon_layer(self, rng):
        # g = (x, y) -> (y, -x), so R g^-1 R g = -I
        m = Model(Kind.REVERSIBLE_HENON, 2, (HenonLayer(np.zeros(4)),), Involution.momentum_flip())
        g = np.array([[0.0, 1.0], [-1.0, 0.0]])
        R = np.diag([1.0, -1.0])
        expected = R @ np.linalg.inv(g) @ R @ g
        assert np.array_equal(expected, -np.eye(2))
        X = rng.normal(size=(10, 2))
        assert np.allclose(m.forward(X), X @ expected.T, atol=1e-15)

    @pytest.mark.parametrize("c", [1.0, 3.0])
    def test_one_layer_hand_formula(self, rng, c):
        # one layer gives T(x, y) = (2 c V'(y / c) - x, -y)
        a = rng.uniform(-1, 1, 4)
        m = Model(Kind.REVERSIBLE_HENON, 2, (HenonLayer(a),), Involution.momentum_flip(), scale=c)
        X = rng.normal(size=(10, 2))
        x, y = X[:, 0], X[:, 1] / c
        dV = a[0] + 2 * a[1] * y + 3 * a[2] * y ** 2 + 4 * a[3] * y ** 3
        assert np.allclose(m.forward(X), np.stack([2 * c * dV - x, -X[:, 1]], axis=1), atol=1e-13)

    @pytest.mark.parametrize("c", [1.0, 3.0])
    def test_one_layer_hand_gradient(self, rng, c):
        # d T_1 / d a_k = 2 k c (y / c)^(k-1); in particular d T_1 / d a_2 = 4 y
        m = Model(Kind.REVERSIBLE_HENON, 2, (HenonLayer(rng.uniform(-1, 1, 4)),),
                  Involution.momentum_flip(), scale=c)
        X = np.array([[0.3, -0.8]])
        _, gth = m.vjp(X, np.array([[1.0, 0.0]]))
        y = X[0, 1]
        assert gth[1] == pytest.approx(4 * y, abs=1e-14)
        assert np.allclose(gth, [2 * k * c * (y / c) ** (k - 1) for k in range(1, 5)], atol=1e-14)
        _, gth2 = m.vjp(X, np.array([[0.0, 1.0]]))
        assert not np.any(gth2)

    def test_nvp_smoke(self, rng):
        Y = build_model("r", seed=2).forward(region_points(rng, 10_000))
        assert Y.shape == (10_000, 2) and np.all(np.isfinite(Y))

    def test_single_point(self):
        m = build_model("hr")
        assert m.forward(np.array([0.1, 0.2])).shape == (2,)

    def test_baseline_has_no_inverse(self):
        with pytest.raises(TypeError):
            build_model("nn").inverse(np.zeros(2))


@pytest.mark.parametrize("seed", [0, 1, 2])
class TestStructure:
    @pytest.mark.parametrize("kind", ["r", "hr"])
    def test_reversible_kinds(self, kind, seed, rng):
        for spread in SPREADS[kind]:
            m = perturbed(kind, seed, spread)
            X = region_points(rng)
            assert reversibility_residual(m, X) <= 1e-11
            assert inverse_residual(m, X) <= 1e-11

    @pytest.mark.parametrize("kind", ["hr", "sn"])
    def test_symplectic_kinds(self, kind, seed, rng):
        for spread in SPREADS[kind]:
            assert symplecticity_residual(perturbed(kind, seed, spread), region_points(rng)) <= 1e-10

    def test_sympnet_inverse(self, seed, rng):
        assert inverse_residual(perturbed("sn", seed, 0.3), region_points(rng)) <= 1e-11

    def test_scale_preserves_structure(self, seed, rng):
        X = 2.7 * region_points(rng)
        m = perturbed("hr", seed, scale=2.7 * HR_SCALE)
        plain = replace(m, scale=HR_SCALE)
        assert np.allclose(m.forward(X), 2.7 * plain.forward(X / 2.7), rtol=0, atol=1e-13)
        assert reversibility_residual(m, X) <= 1e-11
        assert symplecticity_residual(m, X) <= 1e-10

    @pytest.mark.parametrize("kind", KINDS)
    def test_gradcheck(self, kind, seed, rng):
        m = perturbed(kind, seed, scale=1.5)
        X = region_points(rng, 8)
        Y = region_points(rng, 8)

        def obj(theta):
            return 0.5 * np.sum((m.with_params(theta).forward(X) - Y) ** 2)

        _, gth = m.vjp(X, m.forward(X) - Y)
        theta = m.params()
        idx = rng.choice(m.n_params, size=min(25, m.n_params), replace=False)
        assert_close_rel(gth[idx], fd_grad(obj, theta, idx), 1e-5)

        gX, _ = m.vjp(X, m.forward(X) - Y)
        flat = X.ravel()
        fdx = fd_grad(lambda v: 0.5 * np.sum((m.forward(v.reshape(X.shape)) - Y) ** 2), flat, range(flat.size))
        assert_close_rel(gX.ravel(), fdx, 1e-5)

    @pytest.mark.parametrize("kind", KINDS)
    def test_jacobian_matches_vjp(self, kind, seed, rng):
        m = perturbed(kind, seed, scale=1.5)
        X, G = region_points(rng, 5), rng.normal(size=(5, 2))
        gX, _ = m.vjp(X, G)
        assert np.allclose(gX, np.einsum("bi,bij->bj", G, m.jacobian(X)), atol=1e-10)

    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_upstream(self, kind, seed, rng):
        m = perturbed(kind, seed)
        gX, gth = m.vjp(region_points(rng, 4), np.zeros((4, 2)))
        assert not np.any(gX) and not np.any(gth)

    @pytest.mark.parametrize("kind", KINDS)
    def test_save_load(self, kind, seed, rng, tmp_path):
        m = perturbed(kind, seed, scale=1.7)
        m.save(tmp_path / "m.json")
        back = Model.load(tmp_path / "m.json")
        assert back.kind is m.kind and back.scale == m.scale and back.meta == m.meta
        X = region_points(rng, 20)
        assert np.array_equal(back.forward(X), m.forward(X))


def test_nvp_not_symplectic(rng):
    worst = max(symplecticity_residual(perturbed("r", s, 0.5), region_points(rng, 200)) for s in range(3))
    assert worst > 1e-2


def test_tied_gradient_accumulates_both_uses(rng):
    # the parameter cotangent of a reversible model is the sum of contributions
    # from g and g^-1; removing either use changes it
    m = perturbed("hr", 0)
    X, G = region_points(rng, 6), rng.normal(size=(6, 2))
    _, full = m.vjp(X, G)
    c = m.scale
    Xs = X / c
    h, fwd_part = Xs, np.zeros(m.n_params)
    inputs = []
    for f in m.layers:
        inputs.append(h)
        h = f.forward(h)
    R = m.involution.matrix
    h = h @ R.T
    inv_inputs = []
    for f in reversed(m.layers):
        inv_inputs.append(h)
        h = f.inverse(h)
    g = c * G @ R
    inv_part = np.zeros(m.n_params)
    offsets = np.cumsum([0] + [f.n_params for f in m.layers])
    for i, hi in zip(range(len(m.layers)), reversed(inv_inputs)):
        g, gp = m.layers[i].vjp(hi, g, inverse=True)
        inv_part[offsets[i]:offsets[i + 1]] = gp
    g = g @ R
    for i in reversed(range(len(m.layers))):
        g, gp = m.layers[i].vjp(inputs[i], g)
        fwd_part[offsets[i]:offsets[i + 1]] = gp
    assert np.allclose(full, fwd_part + inv_part, atol=1e-12)
    assert np.any(inv_part) and np.any(fwd_part)
