"""Benchmark Hamiltonian systems, their ground-truth return maps and datasets.

Two systems are provided:

* Hénon-Heiles, sampled on the section ``x = 0, p_x > 0`` of a fixed energy
  shell; the return map acts on ``(y, p_y)``.
* A periodically driven pendulum, sampled stroboscopically at ``t = 2*pi``;
  the map acts on ``(q, p)``.

Both maps are evaluated with fixed-step classical RK4.  The hot loops are
compiled with numba; :func:`integrate` is a plain-numpy reference integrator
for arbitrary (possibly time-dependent) vector fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numba
import numpy as np


class DynamicsError(RuntimeError):
    """Base class for failures while evaluating a ground-truth map."""


class IntegrationDivergedError(DynamicsError):
    pass


class OutsideEnergyShellError(DynamicsError):
    pass


class NoReturnError(DynamicsError):
    pass


class RegionInfeasibleError(DynamicsError):
    pass


# status codes returned by the compiled kernels
_OK, _NO_RETURN, _DIVERGED = 0, 1, 2


@dataclass(frozen=True)
class IntegratorConfig:
    step: float = 1e-3
    refine_tol: float = 1e-10
    max_time: float = 100.0

    def __post_init__(self):
        if not (self.step > 0 and self.refine_tol > 0 and self.max_time > 0):
            raise ValueError(f"integrator settings must be positive: {self}")


@dataclass(frozen=True)
class Orbit:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        if len(self.times) < 1 or len(self.times) != len(self.states):
            raise ValueError("orbit needs equal-length, nonempty times and states")


# ---------------------------------------------------------------------------
# Hénon-Heiles


def hh_energy(state, lam: float) -> float:
    x, y, px, py = state
    return 0.5 * (px * px + py * py + x * x + y * y) + lam * (x * x * y - y**3 / 3.0)


def hh_vector_field(state, lam: float) -> np.ndarray:
    x, y, px, py = state
    return np.array([px, py, -x - 2.0 * lam * x * y, -y - lam * (x * x - y * y)])


@dataclass(frozen=True)
class HenonHeilesSystem:
    lam: float = 1.0
    energy: float = 1.0 / 8.0
    region: tuple[tuple[float, float], tuple[float, float]] = ((-0.45, 0.65), (-0.45, 0.45))

    name = "henon-heiles"
    dim = 2
    coordinates = ("y", "p_y")

    def __post_init__(self):
        if self.energy < 0:
            raise ValueError("energy must be non-negative")
        # the shell is nonempty iff the discriminant is positive somewhere on
        # p_y = 0, where it is 2E - y^2 + (2 lam / 3) y^3
        ys = np.linspace(-2.0, 2.0, 4001)
        if not np.any(2 * self.energy - ys**2 + (2 * self.lam / 3) * ys**3 > 0):
            raise ValueError(f"energy {self.energy} gives an empty section domain")

    @property
    def involution(self) -> np.ndarray:
        return np.diag([1.0, -1.0])

    def discriminant(self, y, p_y):
        return 2 * self.energy - p_y * p_y - y * y + (2 * self.lam / 3) * y**3

    def in_domain(self, point) -> bool:
        return bool(self.discriminant(point[0], point[1]) > 0)

    def return_map(self, point, cfg: IntegratorConfig | None = None) -> np.ndarray:
        return hh_poincare_map(point, self, cfg or IntegratorConfig())

    def params(self) -> dict:
        return {"system": self.name, "lambda": self.lam, "energy": self.energy}


def reconstruct_px(y: float, p_y: float, system: HenonHeilesSystem) -> float:
    disc = system.discriminant(y, p_y)
    if not disc > 0:
        raise OutsideEnergyShellError(f"(y, p_y) = ({y}, {p_y}) is not on the section (disc={disc})")
    return math.sqrt(disc)


@numba.njit(cache=True)
def _hh_rhs(s, lam, out):
    x, y = s[0], s[1]
    out[0] = s[2]
    out[1] = s[3]
    out[2] = -x - 2.0 * lam * x * y
    out[3] = -y - lam * (x * x - y * y)


@numba.njit(cache=True)
def _hh_rk4(s, h, lam, out, k1, k2, k3, k4, tmp):
    _hh_rhs(s, lam, k1)
    for i in range(4):
        tmp[i] = s[i] + 0.5 * h * k1[i]
    _hh_rhs(tmp, lam, k2)
    for i in range(4):
        tmp[i] = s[i] + 0.5 * h * k2[i]
    _hh_rhs(tmp, lam, k3)
    for i in range(4):
        tmp[i] = s[i] + h * k3[i]
    _hh_rhs(tmp, lam, k4)
    for i in range(4):
        out[i] = s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@numba.njit(cache=True)
def _hh_return(y, py, px, lam, h, tol, max_time, out):
    s = np.array([0.0, y, px, py])
    new = np.empty(4)
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    tmp = np.empty(4)
    t = 0.0
    while t < max_time:
        _hh_rk4(s, h, lam, new, k1, k2, k3, k4, tmp)
        for i in range(4):
            if not np.isfinite(new[i]):
                return _DIVERGED, t
        # detection starts once the starting point x = 0 is strictly behind us
        if t >= h and s[0] < 0.0 and new[0] >= 0.0 and new[2] > 0.0:
            if abs(new[0]) <= tol:
                for i in range(4):
                    out[i] = new[i]
                return _OK, t + h
            lo, hi = 0.0, h
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                _hh_rk4(s, mid, lam, out, k1, k2, k3, k4, tmp)
                if abs(out[0]) <= tol:
                    return _OK, t + mid
                if out[0] < 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-300:
                    break
            _hh_rk4(s, hi, lam, out, k1, k2, k3, k4, tmp)
            return _OK, t + hi
        for i in range(4):
            s[i] = new[i]
        t += h
    return _NO_RETURN, t


def hh_poincare_map(point, system: HenonHeilesSystem, cfg: IntegratorConfig) -> np.ndarray:
    """First return of ``(y, p_y)`` to the section ``x = 0`` with ``p_x > 0``."""
    y, py = float(point[0]), float(point[1])
    px = reconstruct_px(y, py, system)
    out = np.empty(4)
    status, t = _hh_return(y, py, px, system.lam, cfg.step, cfg.refine_tol, cfg.max_time, out)
    if status == _DIVERGED:
        raise IntegrationDivergedError(f"non-finite state at t={t} from {point}")
    if status == _NO_RETURN:
        raise NoReturnError(f"no return to the section within t={cfg.max_time} from {point}")
    return np.array([out[1], out[3]])


# ---------------------------------------------------------------------------
# Driven pendulum


def _drive(t):
    return 0.3 * math.sin(2.0 * t) + 0.7 * math.sin(3.0 * t)


def pendulum_vector_field(t: float, state, nu: float, lam: float) -> np.ndarray:
    q, p = state
    f = _drive(t)
    return np.array([p - lam * q * f, -nu * nu * math.sin(q) + lam * p * f])


def pendulum_hamiltonian(t: float, state, nu: float, lam: float) -> float:
    q, p = state
    return 0.5 * p * p - nu * nu * math.cos(q) - lam * p * q * _drive(t)


@dataclass(frozen=True)
class DrivenPendulumSystem:
    nu: float = 0.5
    lam: float = 0.1
    region: tuple[tuple[float, float], tuple[float, float]] = ((-math.pi, math.pi), (-1.5, 1.5))

    name = "pendulum"
    dim = 2
    coordinates = ("q", "p")

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    @property
    def involution(self) -> np.ndarray:
        return np.diag([1.0, -1.0])

    def in_domain(self, point) -> bool:
        return True

    def return_map(self, point, cfg: IntegratorConfig | None = None) -> np.ndarray:
        return pendulum_stroboscopic_map(point, self, cfg or IntegratorConfig())

    def params(self) -> dict:
        return {"system": self.name, "nu": self.nu, "lambda": self.lam}


@numba.njit(cache=True)
def _pend_rhs(t, q, p, nu, lam):
    f = 0.3 * math.sin(2.0 * t) + 0.7 * math.sin(3.0 * t)
    return p - lam * q * f, -nu * nu * math.sin(q) + lam * p * f


@numba.njit(cache=True)
def _pend_flow(q, p, nu, lam, t0, t1, h):
    n = int(math.ceil((t1 - t0) / h - 1e-9))
    t = t0
    for k in range(n):
        t_next = t1 if k == n - 1 else t0 + (k + 1) * h
        dt = t_next - t
        a1, b1 = _pend_rhs(t, q, p, nu, lam)
        a2, b2 = _pend_rhs(t + 0.5 * dt, q + 0.5 * dt * a1, p + 0.5 * dt * b1, nu, lam)
        a3, b3 = _pend_rhs(t + 0.5 * dt, q + 0.5 * dt * a2, p + 0.5 * dt * b2, nu, lam)
        a4, b4 = _pend_rhs(t_next, q + dt * a3, p + dt * b3, nu, lam)
        q = q + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        p = p + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        t = t_next
        if not (np.isfinite(q) and np.isfinite(p)):
            return _DIVERGED, q, p
    return _OK, q, p


def pendulum_stroboscopic_map(point, system: DrivenPendulumSystem, cfg: IntegratorConfig) -> np.ndarray:
    """Time-``2*pi`` flow map of the driven pendulum; ``q`` is not wrapped."""
    status, q, p = _pend_flow(float(point[0]), float(point[1]), system.nu, system.lam,
                              0.0, 2.0 * math.pi, cfg.step)
    if status == _DIVERGED:
        raise IntegrationDivergedError(f"non-finite state from {point}")
    return np.array([q, p])


# ---------------------------------------------------------------------------
# Generic reference integrator


def integrate(field: Callable[[float, np.ndarray], np.ndarray], x0, t0: float, t1: float,
              cfg: IntegratorConfig) -> Orbit:
    """Fixed-step RK4 from ``t0`` to ``t1``; the last step is shortened to land on ``t1``."""
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    h = cfg.step
    n = int(math.ceil((t1 - t0) / h - 1e-9))
    times = np.empty(n + 1)
    states = np.empty((n + 1, len(x0)))
    x = np.asarray(x0, dtype=float).copy()
    t = t0
    times[0], states[0] = t, x
    for k in range(n):
        t_next = t1 if k == n - 1 else t0 + (k + 1) * h
        dt = t_next - t
        k1 = field(t, x)
        k2 = field(t + 0.5 * dt, x + 0.5 * dt * k1)
        k3 = field(t + 0.5 * dt, x + 0.5 * dt * k2)
        k4 = field(t_next, x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(f"non-finite state at t={t_next}")
        t = t_next
        times[k + 1], states[k + 1] = t, x
    return Orbit(times, states)


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.inputs.ndim != 2 or self.inputs.shape != self.targets.shape or len(self.inputs) == 0:
            raise ValueError("inputs and targets must be equal-shape, nonempty (N, d) arrays")

    def __len__(self):
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], dict(self.meta))

    def save(self, path) -> None:
        """Write ``path`` as CSV and a ``key = value`` sidecar at ``path.meta``."""
        path = Path(path)
        d = self.dim
        header = [f"x_in_{i + 1}" for i in range(d)] + [f"x_out_{i + 1}" for i in range(d)]
        lines = [",".join(header)]
        for a, b in zip(self.inputs, self.targets):
            lines.append(",".join(repr(float(v)) for v in (*a, *b)))
        path.write_text("\n".join(lines) + "\n")
        meta = dict(self.meta, N=len(self))
        meta_path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in meta.items()))

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        rows = path.read_text().strip().splitlines()
        header = rows[0].split(",")
        d = len(header) // 2
        if len(header) != 2 * d or header[0] != "x_in_1":
            raise ValueError(f"{path}: unexpected header {header}")
        data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        meta = {}
        mp = meta_path(path)
        if mp.exists():
            for line in mp.read_text().splitlines():
                if "=" in line:
                    k, v = line.split("=", 1)
                    meta[k.strip()] = _parse(v.strip())
        return cls(data[:, :d], data[:, d:], meta)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _parse(s: str):
    if s.startswith("["):
        inner = s[1:-1].strip()
        if not inner:
            return []
        # only flat or once-nested numeric lists are written
        if inner.startswith("["):
            parts = inner[1:-1].split("], [")
            return [[float(x) for x in p.split(",")] for p in parts]
        return [float(x) for x in inner.split(",")]
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def make_system(name: str, **params):
    if name in ("henon-heiles", "hh"):
        return HenonHeilesSystem(**params)
    if name in ("pendulum", "driven-pendulum"):
        return DrivenPendulumSystem(**params)
    raise ValueError(f"unknown system {name!r}")


def system_from_meta(meta: dict):
    """Rebuild a system from dataset (or model) metadata written by :func:`generate_dataset`."""
    name = meta["system"]
    keys = {"lambda": "lam", "energy": "energy", "nu": "nu"}
    params = {keys[k]: float(v) for k, v in meta.items() if k in keys}
    if name in ("pendulum", "driven-pendulum"):
        params.pop("energy", None)
    else:
        params.pop("nu", None)
    if meta.get("region") is not None:
        params["region"] = tuple(tuple(float(x) for x in r) for r in meta["region"])
    return make_system(name, **params)


def generate_dataset(system, n: int, seed: int, cfg: IntegratorConfig | None = None,
                     region=None) -> Dataset:
    """Sample ``n`` valid (point, map(point)) pairs uniformly from ``region``.

    Candidates on which the ground-truth map fails are redrawn; more than 99%
    rejections raises :class:`RegionInfeasibleError`.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    cfg = cfg or IntegratorConfig()
    region = np.asarray(region if region is not None else system.region, dtype=float)
    lo, hi = region[:, 0], region[:, 1]
    if np.any(hi <= lo):
        raise ValueError(f"empty region {region.tolist()}")
    rng = np.random.default_rng(seed)
    inputs, targets = [], []
    attempts = 0
    max_attempts = 100 * n
    while len(inputs) < n:
        if attempts >= max_attempts:
            raise RegionInfeasibleError(
                f"only {len(inputs)} of {attempts} candidates were valid in region {region.tolist()}")
        attempts += 1
        x = lo + (hi - lo) * rng.random(len(lo))
        try:
            y = system.return_map(x, cfg)
        except DynamicsError:
            continue
        inputs.append(x)
        targets.append(y)
    meta = dict(system.params())
    meta.update(seed=seed, step=cfg.step, refine_tol=cfg.refine_tol, max_time=cfg.max_time,
                region=[list(map(float, r)) for r in region], attempts=attempts)
    return Dataset(np.array(inputs), np.array(targets), meta)
