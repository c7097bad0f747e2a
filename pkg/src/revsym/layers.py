"""Invertible trainable layers with exact inverses, Jacobians and VJPs.

All layers act on batches ``X`` of shape ``(B, d)`` and are immutable: a
parameter update goes through :meth:`with_params`, which returns a new layer.
Every invertible layer exposes the same surface:

``forward(X)``, ``inverse(Y)``
    Evaluate the map or its analytic inverse.
``vjp(X, G, inverse=False)``
    Reverse-mode product for the chosen direction.  ``X`` is the input *in
    that direction* and ``G`` the cotangent of the output; returns
    ``(input cotangent, flat parameter cotangent)``.  The inverse direction
    differentiates the inverse formulas directly, with the same parameters.
``jacobian(X, inverse=False)``
    Exact ``(B, d, d)`` Jacobian in the chosen direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np


def _check_dim(X, d, what):
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"{what}: expected shape (B, {d}), got {X.shape}")


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpNet:
    """Affine/tanh chain; the last layer is affine.  ``weights[i]`` is ``(in, out)``."""

    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {W.shape} vs bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i}: input dim does not match previous output")

    @classmethod
    def init(cls, layer_dims, rng) -> "MlpNet":
        ws = tuple(_glorot(rng, a, b) for a, b in zip(layer_dims[:-1], layer_dims[1:]))
        bs = tuple(np.zeros(b) for b in layer_dims[1:])
        return cls(ws, bs)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    def with_params(self, theta) -> "MlpNet":
        ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            ws.append(np.array(theta[k:k + W.size]).reshape(W.shape))
            k += W.size
            bs.append(np.array(theta[k:k + b.size]))
            k += b.size
        return replace(self, weights=tuple(ws), biases=tuple(bs))

    def _hidden(self, X):
        _check_dim(X, self.dim, "mlp")
        hs = [X]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            hs.append(np.tanh(hs[-1] @ W + b))
        return hs

    def forward(self, X):
        hs = self._hidden(X)
        return hs[-1] @ self.weights[-1] + self.biases[-1]

    def vjp(self, X, G, inverse=False):
        if inverse:
            raise TypeError("an MLP has no inverse")
        hs = self._hidden(X)
        grads = []
        g = G
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append((hs[i].T @ g, g.sum(axis=0)))
            g = g @ self.weights[i].T
            if i:
                g = g * (1.0 - hs[i] ** 2)
        flat = np.concatenate([a.ravel() for gW, gb in reversed(grads) for a in (gW, gb)])
        return g, flat

    def jacobian(self, X, inverse=False):
        if inverse:
            raise TypeError("an MLP has no inverse")
        hs = self._hidden(X)
        J = np.broadcast_to(np.eye(self.dim), (len(X), self.dim, self.dim))
        for i, W in enumerate(self.weights):
            J = np.einsum("io,bij->boj", W, J)
            if i < len(self.weights) - 1:
                J = J * (1.0 - hs[i + 1] ** 2)[:, :, None]
        return J

    def to_dict(self) -> dict:
        return {"type": "mlp", "activation": self.activation,
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d) -> "MlpNet":
        ws = tuple(np.array(W, dtype=float).reshape(len(W), -1) for W in d["weights"])
        return cls(ws, tuple(np.array(b, dtype=float) for b in d["biases"]), d.get("activation", "tanh"))


# ---------------------------------------------------------------------------
# Real NVP coupling


@dataclass(frozen=True)
class RealNvpLayer:
    """Affine coupling: the passive block is copied, the active block becomes
    ``x_a * exp(s(x_p)) + t(x_p)``.  ``mask_parity`` puts the passive block
    last instead of first."""

    dim: int
    split: int
    mask_parity: bool
    s_net: MlpNet
    t_net: MlpNet

    def __post_init__(self):
        if not 0 < self.split < self.dim:
            raise ValueError("need 0 < split < dim")
        for net in (self.s_net, self.t_net):
            if net.layer_dims[0] != self.split or net.layer_dims[-1] != self.dim - self.split:
                raise ValueError("s/t nets must map R^split -> R^(dim - split)")

    @classmethod
    def init(cls, dim, split, mask_parity, rng, hidden=(16,)) -> "RealNvpLayer":
        dims = [split, *hidden, dim - split]
        return cls(dim, split, bool(mask_parity), MlpNet.init(dims, rng), MlpNet.init(dims, rng))

    @property
    def _blocks(self):
        d, k = self.dim, self.split
        if self.mask_parity:
            return slice(d - k, d), slice(0, d - k)
        return slice(0, k), slice(k, d)

    @property
    def n_params(self) -> int:
        return self.s_net.n_params + self.t_net.n_params

    def params(self):
        return np.concatenate([self.s_net.params(), self.t_net.params()])

    def with_params(self, theta):
        k = self.s_net.n_params
        return replace(self, s_net=self.s_net.with_params(theta[:k]),
                       t_net=self.t_net.with_params(theta[k:]))

    def forward(self, X):
        _check_dim(X, self.dim, "realnvp")
        P, A = self._blocks
        xp = X[:, P]
        Y = X.copy()
        Y[:, A] = X[:, A] * np.exp(self.s_net.forward(xp)) + self.t_net.forward(xp)
        return Y

    def inverse(self, Y):
        _check_dim(Y, self.dim, "realnvp")
        P, A = self._blocks
        yp = Y[:, P]
        X = Y.copy()
        X[:, A] = (Y[:, A] - self.t_net.forward(yp)) * np.exp(-self.s_net.forward(yp))
        return X

    def log_det_jacobian(self, X):
        P, _ = self._blocks
        return self.s_net.forward(X[:, P]).sum(axis=1)

    def vjp(self, X, G, inverse=False):
        _check_dim(X, self.dim, "realnvp")
        P, A = self._blocks
        xp, xa, ga = X[:, P], X[:, A], G[:, A]
        s = self.s_net.forward(xp)
        if not inverse:
            es = np.exp(s)
            g_s, g_t = ga * xa * es, ga
            g_a = ga * es
        else:
            t = self.t_net.forward(xp)
            e = np.exp(-s)
            out_a = (xa - t) * e
            g_s, g_t = -ga * out_a, -ga * e
            g_a = ga * e
        gps, ths = self.s_net.vjp(xp, g_s)
        gpt, tht = self.t_net.vjp(xp, g_t)
        GX = np.empty_like(X)
        GX[:, P] = G[:, P] + gps + gpt
        GX[:, A] = g_a
        return GX, np.concatenate([ths, tht])

    def jacobian(self, X, inverse=False):
        _check_dim(X, self.dim, "realnvp")
        P, A = self._blocks
        xp, xa = X[:, P], X[:, A]
        s = self.s_net.forward(xp)
        Js, Jt = self.s_net.jacobian(xp), self.t_net.jacobian(xp)
        B = len(X)
        J = np.zeros((B, self.dim, self.dim))
        idx_p = np.arange(self.dim)[P]
        idx_a = np.arange(self.dim)[A]
        J[:, idx_p, idx_p] = 1.0
        if not inverse:
            es = np.exp(s)
            J[:, idx_a, idx_a] = es
            cross = (xa * es)[:, :, None] * Js + Jt
        else:
            e = np.exp(-s)
            out_a = (xa - self.t_net.forward(xp)) * e
            J[:, idx_a, idx_a] = e
            cross = -e[:, :, None] * Jt - out_a[:, :, None] * Js
        J[:, idx_a[:, None], idx_p[None, :]] = cross
        return J

    def to_dict(self):
        return {"type": "realnvp", "dim": self.dim, "split": self.split,
                "mask_parity": self.mask_parity,
                "s_net": self.s_net.to_dict(), "t_net": self.t_net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["dim"]), int(d["split"]), bool(d["mask_parity"]),
                   MlpNet.from_dict(d["s_net"]), MlpNet.from_dict(d["t_net"]))


# ---------------------------------------------------------------------------
# Polynomial Hénon map


@dataclass(frozen=True)
class HenonLayer:
    """``(x, y) -> (y, -x + V'(y))`` with ``V(y) = sum_k coeffs[k-1] * y**k``."""

    coeffs: np.ndarray
    dim_half: int = 1

    def __post_init__(self):
        if self.dim_half != 1:
            raise ValueError("only dim_half = 1 Hénon layers are supported")
        if np.ndim(self.coeffs) != 1 or len(self.coeffs) < 1:
            raise ValueError("coeffs must be a nonempty vector")

    @classmethod
    def init(cls, rng, degree=4, scale=0.1) -> "HenonLayer":
        return cls(rng.uniform(-scale, scale, size=degree))

    dim = 2

    @property
    def degree(self) -> int:
        return len(self.coeffs)

    @property
    def n_params(self) -> int:
        return len(self.coeffs)

    def params(self):
        return np.array(self.coeffs, dtype=float)

    def with_params(self, theta):
        return replace(self, coeffs=np.array(theta, dtype=float))

    def dV(self, y):
        a = self.coeffs
        out = np.full_like(y, self.degree * a[-1])
        for k in range(self.degree - 1, 0, -1):
            out = out * y + k * a[k - 1]
        return out

    def d2V(self, y):
        a = self.coeffs
        out = np.zeros_like(y)
        for k in range(self.degree, 1, -1):
            out = out * y + k * (k - 1) * a[k - 1]
        return out

    def _powers(self, y):
        # d V'(y) / d a_k = k y^(k-1)
        return np.stack([k * y ** (k - 1) for k in range(1, self.degree + 1)], axis=-1)

    def forward(self, Z):
        _check_dim(Z, 2, "henon")
        x, y = Z[:, 0], Z[:, 1]
        return np.stack([y, -x + self.dV(y)], axis=1)

    def inverse(self, W):
        _check_dim(W, 2, "henon")
        xb, yb = W[:, 0], W[:, 1]
        return np.stack([self.dV(xb) - yb, xb], axis=1)

    def vjp(self, Z, G, inverse=False):
        _check_dim(Z, 2, "henon")
        g0, g1 = G[:, 0], G[:, 1]
        if not inverse:
            y = Z[:, 1]
            gin = np.stack([-g1, g0 + g1 * self.d2V(y)], axis=1)
            gth = (g1[:, None] * self._powers(y)).sum(axis=0)
        else:
            xb = Z[:, 0]
            gin = np.stack([g0 * self.d2V(xb) + g1, -g0], axis=1)
            gth = (g0[:, None] * self._powers(xb)).sum(axis=0)
        return gin, gth

    def jacobian(self, Z, inverse=False):
        _check_dim(Z, 2, "henon")
        J = np.zeros((len(Z), 2, 2))
        if not inverse:
            J[:, 0, 1] = 1.0
            J[:, 1, 0] = -1.0
            J[:, 1, 1] = self.d2V(Z[:, 1])
        else:
            J[:, 0, 0] = self.d2V(Z[:, 0])
            J[:, 0, 1] = -1.0
            J[:, 1, 0] = 1.0
        return J

    def to_dict(self):
        return {"type": "henon", "dim_half": self.dim_half, "coeffs": self.params().tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["coeffs"], dtype=float), int(d.get("dim_half", 1)))


# ---------------------------------------------------------------------------
# SympNet modules (z = (p, q), each block of size n)


@lru_cache(maxsize=None)
def _triu(n):
    iu = np.triu_indices(n)
    lower = (iu[1], iu[0])
    return iu, lower


def _sym_from_triu(v, n):
    iu, lower = _triu(n)
    S = np.empty((n, n))
    S[iu] = v
    S[lower] = v
    return S


def _triu_grad(G):
    # gradient w.r.t. upper-triangle storage of a symmetric matrix
    iu, lower = _triu(G.shape[0])
    return G[iu] + np.where(iu[0] == iu[1], 0.0, G[lower])


@dataclass(frozen=True)
class SympNetLinearModule:
    """Alternating unit-triangular shears ``p += S q`` ("up") and ``q += S p``
    ("low"), starting with "up", followed by a bias."""

    dim_half: int
    sublayers: tuple
    bias: np.ndarray

    def __post_init__(self):
        n = self.dim_half
        for S in self.sublayers:
            if S.shape != (n, n) or not np.array_equal(S, S.T):
                raise ValueError("sympnet sublayers must be symmetric n x n")
        if self.bias.shape != (2 * n,):
            raise ValueError("bias must have length 2n")

    @classmethod
    def init(cls, dim_half, n_sublayers, rng, scale=0.01):
        n = dim_half
        m = n * (n + 1) // 2
        subs = tuple(_sym_from_triu(rng.uniform(-scale, scale, m), n) for _ in range(n_sublayers))
        return cls(n, subs, np.zeros(2 * n))

    @property
    def dim(self):
        return 2 * self.dim_half

    @property
    def n_params(self):
        n = self.dim_half
        return len(self.sublayers) * n * (n + 1) // 2 + 2 * n

    def params(self):
        iu, _ = _triu(self.dim_half)
        return np.concatenate([S[iu] for S in self.sublayers] + [self.bias])

    def with_params(self, theta):
        n = self.dim_half
        m = n * (n + 1) // 2
        subs = tuple(_sym_from_triu(theta[i * m:(i + 1) * m], n) for i in range(len(self.sublayers)))
        return replace(self, sublayers=subs, bias=np.array(theta[len(subs) * m:], dtype=float))

    def _shear(self, P, Q, k, sign):
        S = self.sublayers[k]
        if k % 2 == 0:
            return P + sign * (Q @ S), Q
        return P, Q + sign * (P @ S)

    def forward(self, Z):
        _check_dim(Z, self.dim, "sympnet-linear")
        n = self.dim_half
        P, Q = Z[:, :n], Z[:, n:]
        for k in range(len(self.sublayers)):
            P, Q = self._shear(P, Q, k, 1.0)
        return np.concatenate([P, Q], axis=1) + self.bias

    def inverse(self, W):
        _check_dim(W, self.dim, "sympnet-linear")
        n = self.dim_half
        W = W - self.bias
        P, Q = W[:, :n], W[:, n:]
        for k in range(len(self.sublayers) - 1, -1, -1):
            P, Q = self._shear(P, Q, k, -1.0)
        return np.concatenate([P, Q], axis=1)

    def vjp(self, Z, G, inverse=False):
        _check_dim(Z, self.dim, "sympnet-linear")
        n = self.dim_half
        K = len(self.sublayers)
        if not inverse:
            order, sign = list(range(K)), 1.0
            P, Q = Z[:, :n], Z[:, n:]
        else:
            order, sign = list(range(K - 1, -1, -1)), -1.0
            W = Z - self.bias
            P, Q = W[:, :n], W[:, n:]
        states = []
        for k in order:
            states.append((P, Q))
            P, Q = self._shear(P, Q, k, sign)
        gP, gQ = G[:, :n], G[:, n:]
        gsub = [None] * K
        for k, (P, Q) in zip(reversed(order), reversed(states)):
            S = self.sublayers[k]
            if k % 2 == 0:
                gsub[k] = _triu_grad(sign * gP.T @ Q)
                gQ = gQ + sign * (gP @ S)
            else:
                gsub[k] = _triu_grad(sign * gQ.T @ P)
                gP = gP + sign * (gQ @ S)
        gbias = G.sum(axis=0) if not inverse else -np.concatenate([gP, gQ], axis=1).sum(axis=0)
        return np.concatenate([gP, gQ], axis=1), np.concatenate(gsub + [gbias])

    def matrix(self, inverse=False):
        n = self.dim_half
        M = np.eye(2 * n)
        I = np.eye(n)
        Z = np.zeros((n, n))
        ks = range(len(self.sublayers)) if not inverse else range(len(self.sublayers) - 1, -1, -1)
        sign = 1.0 if not inverse else -1.0
        for k in ks:
            S = sign * self.sublayers[k]
            F = np.block([[I, S], [Z, I]]) if k % 2 == 0 else np.block([[I, Z], [S, I]])
            M = F @ M
        return M

    def jacobian(self, Z, inverse=False):
        _check_dim(Z, self.dim, "sympnet-linear")
        return np.broadcast_to(self.matrix(inverse), (len(Z), self.dim, self.dim)).copy()

    def to_dict(self):
        iu, _ = _triu(self.dim_half)
        return {"type": "sympnet_linear", "dim_half": self.dim_half,
                "sublayers": [S[iu].tolist() for S in self.sublayers], "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d):
        n = int(d["dim_half"])
        return cls(n, tuple(_sym_from_triu(np.array(v, dtype=float), n) for v in d["sublayers"]),
                   np.array(d["bias"], dtype=float))


@dataclass(frozen=True)
class SympNetActivationModule:
    """Shear ``p += scale * tanh(q)`` ("up") or ``q += scale * tanh(p)`` ("low")."""

    dim_half: int
    scale: np.ndarray
    parity: str = "up"
    activation: str = "tanh"

    def __post_init__(self):
        if self.parity not in ("up", "low"):
            raise ValueError("parity must be 'up' or 'low'")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.scale.shape != (self.dim_half,):
            raise ValueError("scale must have length n")

    @classmethod
    def init(cls, dim_half, parity, rng, scale=0.01):
        return cls(dim_half, rng.uniform(-scale, scale, dim_half), parity)

    @property
    def dim(self):
        return 2 * self.dim_half

    @property
    def n_params(self):
        return self.dim_half

    def params(self):
        return np.array(self.scale, dtype=float)

    def with_params(self, theta):
        return replace(self, scale=np.array(theta, dtype=float))

    def _blocks(self):
        n = self.dim_half
        # (moved block, driving block)
        return (slice(0, n), slice(n, 2 * n)) if self.parity == "up" else (slice(n, 2 * n), slice(0, n))

    def _apply(self, Z, sign):
        _check_dim(Z, self.dim, "sympnet-activation")
        mv, dr = self._blocks()
        out = Z.copy()
        out[:, mv] = Z[:, mv] + sign * self.scale * np.tanh(Z[:, dr])
        return out

    def forward(self, Z):
        return self._apply(Z, 1.0)

    def inverse(self, W):
        return self._apply(W, -1.0)

    def vjp(self, Z, G, inverse=False):
        _check_dim(Z, self.dim, "sympnet-activation")
        sign = -1.0 if inverse else 1.0
        mv, dr = self._blocks()
        th = np.tanh(Z[:, dr])
        gin = G.copy()
        gin[:, dr] = G[:, dr] + sign * G[:, mv] * self.scale * (1.0 - th**2)
        return gin, sign * (G[:, mv] * th).sum(axis=0)

    def jacobian(self, Z, inverse=False):
        _check_dim(Z, self.dim, "sympnet-activation")
        sign = -1.0 if inverse else 1.0
        mv, dr = self._blocks()
        n = self.dim_half
        J = np.broadcast_to(np.eye(2 * n), (len(Z), 2 * n, 2 * n)).copy()
        d = sign * self.scale * (1.0 - np.tanh(Z[:, dr]) ** 2)
        rows = np.arange(2 * n)[mv]
        cols = np.arange(2 * n)[dr]
        J[:, rows, cols] = d
        return J

    def to_dict(self):
        return {"type": "sympnet_activation", "dim_half": self.dim_half, "parity": self.parity,
                "activation": self.activation, "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["dim_half"]), np.array(d["scale"], dtype=float), d["parity"],
                   d.get("activation", "tanh"))


LAYER_TYPES = {
    "mlp": MlpNet,
    "realnvp": RealNvpLayer,
    "henon": HenonLayer,
    "sympnet_linear": SympNetLinearModule,
    "sympnet_activation": SympNetActivationModule,
}


def layer_from_dict(d):
    try:
        cls = LAYER_TYPES[d["type"]]
    except KeyError:
        raise ValueError(f"unknown layer type {d.get('type')!r}") from None
    return cls.from_dict(d)
