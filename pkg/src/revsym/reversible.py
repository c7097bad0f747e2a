"""Hypothesis-space models built from the layers in :mod:`revsym.layers`.

Reversible kinds evaluate ``T = R . g^-1 . R . g`` with ``g = f_l . ... . f_1``:
the layer parameters are stored once and used in both the forward and the
inverse direction, so gradients of each layer accumulate from both uses.

Every model carries a fixed, non-trainable length ``scale`` c and evaluates
``c * T(x / c)``.  A scalar conjugation commutes with any linear involution
and leaves ``M^T J M = J`` intact, so it changes neither structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .layers import (HenonLayer, MlpNet, RealNvpLayer, SympNetActivationModule,
                     SympNetLinearModule, layer_from_dict)


class Kind(str, Enum):
    MLP_BASELINE = "MLP_BASELINE"
    REVERSIBLE_NVP = "REVERSIBLE_NVP"
    REVERSIBLE_HENON = "REVERSIBLE_HENON"
    SYMPNET = "SYMPNET"

    @property
    def reversible(self) -> bool:
        return self in (Kind.REVERSIBLE_NVP, Kind.REVERSIBLE_HENON)


# short names used on the command line
KIND_ALIASES = {"nn": Kind.MLP_BASELINE, "r": Kind.REVERSIBLE_NVP,
                "hr": Kind.REVERSIBLE_HENON, "sn": Kind.SYMPNET}


def parse_kind(name) -> Kind:
    if isinstance(name, Kind):
        return name
    if name.lower() in KIND_ALIASES:
        return KIND_ALIASES[name.lower()]
    try:
        return Kind(name.upper())
    except ValueError:
        raise ValueError(f"unknown model kind {name!r}") from None


def symplectic_J(d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("symplectic form needs an even dimension")
    n = d // 2
    return np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])


@dataclass(frozen=True)
class Involution:
    matrix: np.ndarray
    antisymplectic: bool = False

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", M)
        d = M.shape[0]
        if M.shape != (d, d) or np.max(np.abs(M @ M - np.eye(d))) > 1e-14:
            raise ValueError("involution matrix must square to the identity")
        if self.antisymplectic:
            J = symplectic_J(d)
            if np.max(np.abs(M.T @ J @ M + J)) > 1e-14:
                raise ValueError("matrix is not anti-symplectic")

    @classmethod
    def momentum_flip(cls, d: int = 2) -> "Involution":
        """Negate the momentum block of ``(coordinates, momenta)``."""
        n = d // 2
        return cls(np.diag([1.0] * n + [-1.0] * n), antisymplectic=True)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, X):
        return X @ self.matrix.T


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class Model:
    kind: Kind
    dim: int
    layers: tuple
    involution: Involution | None = None
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise StructureError("scale must be positive and finite")
        kind = parse_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "layers", tuple(self.layers))
        expected = {Kind.REVERSIBLE_NVP: (RealNvpLayer,), Kind.REVERSIBLE_HENON: (HenonLayer,),
                    Kind.SYMPNET: (SympNetLinearModule, SympNetActivationModule),
                    Kind.MLP_BASELINE: (MlpNet,)}[kind]
        for f in self.layers:
            if not isinstance(f, expected):
                raise StructureError(f"{kind.value} cannot hold a {type(f).__name__}")
            if f.dim != self.dim:
                raise StructureError(f"layer dim {f.dim} != model dim {self.dim}")
        if kind == Kind.MLP_BASELINE:
            if len(self.layers) != 1:
                raise StructureError("the baseline holds exactly one MLP")
            if self.layers[0].layer_dims[-1] != self.dim:
                raise StructureError("baseline MLP output dim must equal model dim")
        if kind.reversible:
            if self.involution is None or self.involution.dim != self.dim:
                raise StructureError("reversible models need an involution of matching dim")

    # -- parameters ---------------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(f.n_params for f in self.layers)

    def params(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([f.params() for f in self.layers])

    def with_params(self, theta) -> "Model":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        new, k = [], 0
        for f in self.layers:
            new.append(f.with_params(theta[k:k + f.n_params]))
            k += f.n_params
        return replace(self, layers=tuple(new))

    # -- evaluation -----------------------------------------------------------

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {X.shape[1]}")
        return X, single

    def _trace(self):
        """Ordered (layer index, inverse?) applications; index ``None`` stands for R."""
        if self.kind == Kind.MLP_BASELINE:
            return [(0, False)]
        n = len(self.layers)
        steps = [(i, False) for i in range(n)]
        if self.kind.reversible:
            steps += [(None, False)] + [(i, True) for i in reversed(range(n))] + [(None, False)]
        return steps

    def _run(self, X, keep=False):
        h, inputs = X, []
        for i, inv in self._trace():
            inputs.append(h)
            if i is None:
                h = self.involution(h)
            elif inv:
                h = self.layers[i].inverse(h)
            else:
                h = self.layers[i].forward(h)
        return (h, inputs) if keep else h

    def forward(self, X):
        X, single = self._check(X)
        c = self.scale
        Y = c * self._run(X / c)
        return Y[0] if single else Y

    __call__ = forward

    def inverse(self, Y):
        if self.kind == Kind.MLP_BASELINE:
            raise TypeError("the MLP baseline has no inverse")
        Y, single = self._check(Y)
        c = self.scale
        if self.kind.reversible:
            R = self.involution
            X = R(self._run(R(Y / c)))
        else:
            X = Y / c
            for f in reversed(self.layers):
                X = f.inverse(X)
        X = c * X
        return X[0] if single else X

    def linearize(self, X):
        """Return ``(Y, pullback)``; ``pullback(G)`` gives ``(input cotangent, flat parameter cotangent)``."""
        X, _ = self._check(X)
        c = self.scale
        Y, inputs = self._run(X / c, keep=True)
        trace = self._trace()
        offsets = np.cumsum([0] + [f.n_params for f in self.layers])

        def pullback(G):
            g = c * np.atleast_2d(np.asarray(G, dtype=float))
            gtheta = np.zeros(offsets[-1])
            for (i, inv), h in zip(reversed(trace), reversed(inputs)):
                if i is None:
                    g = g @ self.involution.matrix
                    continue
                g, gp = self.layers[i].vjp(h, g, inverse=inv)
                gtheta[offsets[i]:offsets[i + 1]] += gp
            return g / c, gtheta

        return c * Y, pullback

    def vjp(self, X, G):
        """Return ``(input cotangent, flat parameter cotangent)`` for upstream ``G``."""
        return self.linearize(X)[1](G)

    def jacobian(self, X):
        X, _ = self._check(X)
        _, inputs = self._run(X / self.scale, keep=True)
        M = np.broadcast_to(np.eye(self.dim), (len(X), self.dim, self.dim))
        for (i, inv), h in zip(self._trace(), inputs):
            Jf = self.involution.matrix if i is None else self.layers[i].jacobian(h, inverse=inv)
            M = Jf @ M
        return M

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "dim": self.dim,
            "involution": None if self.involution is None else {
                "matrix": self.involution.matrix.ravel().tolist(),
                "antisymplectic": self.involution.antisymplectic},
            "scale": self.scale,
            "layers": [f.to_dict() for f in self.layers],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d) -> "Model":
        dim = int(d["dim"])
        inv = d.get("involution")
        involution = None if inv is None else Involution(
            np.array(inv["matrix"], dtype=float).reshape(dim, dim), bool(inv.get("antisymplectic", False)))
        return cls(d["kind"], dim, tuple(layer_from_dict(l) for l in d["layers"]), involution,
                   float(d.get("scale", 1.0)), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_dict(json.loads(Path(path).read_text()))


def param_count(model: Model) -> int:
    return model.n_params


# ---------------------------------------------------------------------------
# constructors


def build_model(kind, dim=2, seed=0, *, depth=None, degree=4, hidden=(16,), mlp_width=34,
                sublayers=8, scale=1.0, henon_init=0.05, involution: Involution | None = None,
                meta=None) -> Model:
    """Instantiate one of the four hypothesis spaces at random initialization.

    Defaults: MLP baseline with 6 affine layers of width 34 (≈5000 parameters),
    6 Real NVP layers with alternating masks, 25 Hénon layers of degree 4, and a
    SympNet with 18 activation modules interleaved with 8-sublayer linear modules.
    """
    kind = parse_kind(kind)
    rng = np.random.default_rng(seed)
    if involution is None and kind.reversible:
        involution = Involution.momentum_flip(dim)
    info = {"init_seed": seed, "coordinates": "(coordinate, momentum) for each degree of freedom"}
    if kind == Kind.MLP_BASELINE:
        depth = 6 if depth is None else depth
        layers = (MlpNet.init([dim] + [mlp_width] * (depth - 1) + [dim], rng),)
        info.update(depth=depth, width=mlp_width)
    elif kind == Kind.REVERSIBLE_NVP:
        depth = 6 if depth is None else depth
        layers = tuple(RealNvpLayer.init(dim, dim // 2, i % 2 == 1, rng, hidden=tuple(hidden))
                       for i in range(depth))
        info.update(depth=depth, hidden=list(hidden), mask_schedule="alternating")
    elif kind == Kind.REVERSIBLE_HENON:
        if dim != 2:
            raise ValueError("Hénon layers are implemented for dim = 2 only")
        depth = 25 if depth is None else depth
        layers = tuple(HenonLayer.init(rng, degree, henon_init) for _ in range(depth))
        info.update(depth=depth, degree=degree,
                    henon_convention="layer (x, y) = model (coordinate, momentum); no permutation")
    else:
        depth = 18 if depth is None else depth
        n = dim // 2
        mods = [SympNetLinearModule.init(n, sublayers, rng)]
        for i in range(depth):
            mods.append(SympNetActivationModule.init(n, "up" if i % 2 == 0 else "low", rng))
            mods.append(SympNetLinearModule.init(n, sublayers, rng))
        layers = tuple(mods)
        info.update(depth=depth, sublayers=sublayers)
        involution = None
    info.update(meta or {})
    return Model(kind, dim, layers, involution, scale, info)


def identity_model(dim=2) -> Model:
    return Model(Kind.REVERSIBLE_HENON if dim == 2 else Kind.REVERSIBLE_NVP, dim, (),
                 Involution.momentum_flip(dim))


# ---------------------------------------------------------------------------
# structural checks


def reversibility_residual(model: Model, samples, involution: Involution | None = None) -> float:
    """max over samples of |(R . T)^2 (x) - x|."""
    R = involution or model.involution
    if R is None:
        raise ValueError("model has no involution; pass one explicitly")
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    Z = R(model.forward(R(model.forward(X))))
    return float(np.max(np.linalg.norm(Z - X, axis=1)))


def symplecticity_residual(model: Model, samples) -> float:
    """max over samples of max |M^T J M - J| with M the chained exact Jacobian."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    J = symplectic_J(model.dim)
    M = model.jacobian(X)
    D = np.transpose(M, (0, 2, 1)) @ J @ M - J
    return float(np.max(np.abs(D)))


def inverse_residual(model: Model, samples) -> float:
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    return float(np.max(np.linalg.norm(model.inverse(model.forward(X)) - X, axis=1)))
