"""Iterate learned and ground-truth maps; Poincaré clouds, error curves, reports."""

from __future__ import annotations

import colorsys
import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DynamicsError, IntegratorConfig
from .reversible import Involution, Model, inverse_residual, reversibility_residual, symplecticity_residual
from .training import loss


def inflate_box(region, frac: float = 0.2) -> np.ndarray:
    """Widen every interval of ``region`` by ``frac`` of its width, about its centre."""
    region = np.asarray(region, dtype=float)
    mid = region.mean(axis=1)
    half = 0.5 * (region[:, 1] - region[:, 0]) * (1.0 + frac)
    return np.stack([mid - half, mid + half], axis=1)


def _in_box(x, box) -> bool:
    return box is None or bool(np.all(np.isfinite(x)) and np.all(x >= box[:, 0]) and np.all(x <= box[:, 1]))


def as_map(obj, cfg: IntegratorConfig | None = None):
    """Turn a Model, a system, or a callable into a point -> point function."""
    if isinstance(obj, Model):
        return obj.forward
    if hasattr(obj, "return_map"):
        cfg = cfg or IntegratorConfig()
        return lambda x: obj.return_map(x, cfg)
    return obj


def iterate(map_fn, x0, n: int, box=None, cfg: IntegratorConfig | None = None):
    """Return ``(orbit, truncated)``; the orbit stops early when an iterate leaves
    ``box`` or a ground-truth map fails."""
    f = as_map(map_fn, cfg)
    box = None if box is None else np.asarray(box, dtype=float)
    pts = [np.asarray(x0, dtype=float)]
    for _ in range(n):
        try:
            x = np.asarray(f(pts[-1]), dtype=float)
        except DynamicsError:
            return np.array(pts), True
        if not _in_box(x, box):
            return np.array(pts), True
        pts.append(x)
    return np.array(pts), False


def _iterate_model_batch(model: Model, seeds, n, box):
    # all seeds advance together; a seed is frozen once it leaves the box
    X = np.array(seeds, dtype=float)
    orbits = [[x.copy()] for x in X]
    alive = np.ones(len(X), bool)
    with np.errstate(all="ignore"):
        for _ in range(n):
            if not alive.any():
                break
            idx = np.flatnonzero(alive)
            Y = model.forward(X[idx])
            for j, y in zip(idx, Y):
                if _in_box(y, box):
                    orbits[j].append(y)
                    X[j] = y
                else:
                    alive[j] = False
    return [np.array(o) for o in orbits], [not a for a in alive]


@dataclass
class OrbitCloud:
    orbits: list
    truncated: list = field(default_factory=list)

    def in_box_fraction(self, n: int) -> float:
        """Mean over seeds of the fraction of the ``n`` iterates that stayed in the box."""
        return float(np.mean([(len(o) - 1) / n for o in self.orbits])) if n else 1.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("seed_id,iter,c1,c2\n")
        for sid, orb in enumerate(self.orbits):
            for k, x in enumerate(orb):
                buf.write(f"{sid},{k},{float(x[0])!r},{float(x[1])!r}\n")
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "OrbitCloud":
        rows = list(csv.DictReader(Path(path).read_text().splitlines()))
        by_seed: dict[int, list] = {}
        for r in rows:
            by_seed.setdefault(int(r["seed_id"]), []).append((float(r["c1"]), float(r["c2"])))
        return cls([np.array(by_seed[k]) for k in sorted(by_seed)])


def poincare_cloud(map_obj, seeds, n: int, box=None, cfg: IntegratorConfig | None = None) -> OrbitCloud:
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if len(seeds) == 0:
        raise ValueError("need at least one seed")
    box = None if box is None else np.asarray(box, dtype=float)
    if isinstance(map_obj, Model):
        orbits, trunc = _iterate_model_batch(map_obj, seeds, n, box)
        return OrbitCloud(orbits, trunc)
    results = [iterate(map_obj, s, n, box, cfg) for s in seeds]
    return OrbitCloud([o for o, _ in results], [t for _, t in results])


@dataclass
class ErrorCurve:
    mean_error: np.ndarray

    @property
    def iters(self) -> np.ndarray:
        return np.arange(len(self.mean_error))

    def to_csv(self) -> str:
        return "iter,mean_error\n" + "".join(f"{k},{float(e)!r}\n" for k, e in enumerate(self.mean_error))

    def save(self, path):
        Path(path).write_text(self.to_csv())


def error_curve(model, truth: OrbitCloud, cfg: IntegratorConfig | None = None) -> ErrorCurve:
    """Mean Euclidean distance between model iterates and truth orbits, per iteration."""
    lengths = {len(o) for o in truth.orbits}
    if len(lengths) != 1 or lengths.pop() < 2:
        raise ValueError("truth orbits must share a common length >= 2")
    T = np.stack(truth.orbits)  # (orbits, n+1, d)
    n = T.shape[1] - 1
    f = as_map(model, cfg)
    pred = np.empty_like(T)
    pred[:, 0] = T[:, 0]
    with np.errstate(all="ignore"):
        if isinstance(model, Model):
            for k in range(n):
                pred[:, k + 1] = model.forward(pred[:, k])
        else:
            for i in range(len(T)):
                orb, _ = iterate(f, T[i, 0], n, cfg=cfg)
                pred[i, :len(orb)] = orb
                pred[i, len(orb):] = np.nan
    err = np.linalg.norm(pred - T, axis=2).mean(axis=0)
    err[0] = 0.0
    return ErrorCurve(err)


# ---------------------------------------------------------------------------
# seeds and reporting


def default_seeds(system, count: int) -> np.ndarray:
    """Seeds on the symmetry line ``momentum = 0``, spread across the region."""
    (lo, hi), _ = system.region
    if system.name == "henon-heiles":
        ys = np.linspace(lo, hi, 4001)
        ok = ys[[system.in_domain((y, 0.0)) for y in ys]]
        lo, hi = ok.min(), ok.max()
        qs = np.linspace(lo, hi, count + 2)[1:-1]
    else:
        # inside the libration zone, away from the separatrix
        qs = np.linspace(0.75 * lo, 0.75 * hi, count)
    return np.stack([qs, np.zeros_like(qs)], axis=1)


def truth_orbits(system, seeds, n: int, cfg: IntegratorConfig | None = None) -> OrbitCloud:
    cloud = poincare_cloud(system, seeds, n, None, cfg)
    if any(cloud.truncated):
        raise DynamicsError("a ground-truth orbit failed; choose other initial conditions")
    return cloud


def residual_samples(region, count=1000, seed=0) -> np.ndarray:
    """Uniform points in the box ``region``."""
    region = np.asarray(region, dtype=float)
    rng = np.random.default_rng(seed)
    return region[:, 0] + (region[:, 1] - region[:, 0]) * rng.random((count, len(region)))


def domain_samples(system, count=1000, seed=0, region=None) -> np.ndarray:
    """Uniform points of ``region`` (default: the system's sampling region) that
    lie in the system's domain, i.e. candidates :func:`generate_dataset` would accept."""
    region = np.asarray(system.region if region is None else region, dtype=float)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        X = region[:, 0] + (region[:, 1] - region[:, 0]) * rng.random((count, len(region)))
        out.extend(x for x in X if system.in_domain(x))
    return np.array(out[:count])


def model_metrics(model, involution: Involution, samples, val_ds=None,
                  cfg: IntegratorConfig | None = None) -> dict:
    """Report-row metrics.  A ground-truth system gets its validation error but
    NaN residuals: the residuals measure learned structure only."""
    nan = float("nan")
    if not isinstance(model, Model):
        row = {"kind": "GROUND_TRUTH", "n_params": 0}
        if val_ds is not None:
            f = as_map(model, cfg)
            D = np.array([f(x) for x in val_ds.inputs]) - val_ds.targets
            sq = np.sum(D * D, axis=1)
            row.update(val_loss=float(np.mean(sq)), val_distance=float(np.mean(np.sqrt(sq))))
        row.update(reversibility_residual=nan, symplecticity_residual=nan, inverse_residual=nan)
        return row
    row = {"kind": model.kind.value, "n_params": model.n_params}
    if val_ds is not None:
        mse, dist = loss(model, val_ds.inputs, val_ds.targets)
        row.update(val_loss=mse, val_distance=dist)
    with np.errstate(all="ignore"):
        row["reversibility_residual"] = reversibility_residual(model, samples, involution)
        row["symplecticity_residual"] = symplecticity_residual(model, samples)
        row["inverse_residual"] = (inverse_residual(model, samples)
                                   if model.kind.value != "MLP_BASELINE" else nan)
    return row


REPORT_COLUMNS = ["name", "kind", "n_params", "val_loss", "val_distance", "reversibility_residual",
                  "symplecticity_residual", "inverse_residual", "err_iter_1", "err_iter_10",
                  "err_final", "cloud_in_box_fraction"]


def compare_report(models: dict, system, out_dir, *, val_ds=None, n_cloud=500, n_cloud_seeds=20,
                   n_err=20, n_err_orbits=5, box=None, cfg: IntegratorConfig | None = None,
                   truth_cloud: OrbitCloud | None = None, svg=True) -> list[dict]:
    """Evaluate named models against the ground truth of ``system``.

    Writes ``report.csv``, ``error_<name>.csv``, ``cloud_<name>.csv`` (and SVG)
    for every model plus ``cloud_truth.csv`` into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg or IntegratorConfig()
    region = np.asarray(system.region, dtype=float)
    box = inflate_box(region) if box is None else np.asarray(box, dtype=float)
    dims = {m.dim for m in models.values()}
    if len(dims) > 1:
        raise ValueError(f"models disagree on dimension: {dims}")
    cloud_seeds = default_seeds(system, n_cloud_seeds)
    err_seeds = cloud_seeds[np.linspace(0, len(cloud_seeds) - 1, n_err_orbits).astype(int)]
    truth = truth_orbits(system, err_seeds, n_err, cfg)
    if truth_cloud is None:
        truth_cloud = poincare_cloud(system, cloud_seeds, n_cloud, box, cfg)
    truth_cloud.save(out / "cloud_truth.csv")
    if svg:
        write_svg(truth_cloud, out / "cloud_truth.svg", box, title="ground truth")
    samples = domain_samples(system)
    R = Involution(system.involution, antisymplectic=True)
    rows = []
    for name, model in models.items():
        row = {"name": name, **model_metrics(model, R, samples, val_ds, cfg)}
        curve = error_curve(model, truth, cfg)
        curve.save(out / f"error_{name}.csv")
        cloud = truth_cloud if model is system else poincare_cloud(model, cloud_seeds, n_cloud, box, cfg)
        cloud.save(out / f"cloud_{name}.csv")
        if svg:
            write_svg(cloud, out / f"cloud_{name}.svg", box, title=name)
        row.update(err_iter_1=float(curve.mean_error[min(1, n_err)]),
                   err_iter_10=float(curve.mean_error[min(10, n_err)]),
                   err_final=float(curve.mean_error[-1]),
                   cloud_in_box_fraction=cloud.in_box_fraction(n_cloud))
        rows.append(row)
    write_report(rows, out / "report.csv")
    return rows


def write_report(rows, path) -> None:
    lines = [",".join(REPORT_COLUMNS)]
    for r in rows:
        vals = []
        for c in REPORT_COLUMNS:
            v = r.get(c, "")
            vals.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> list[dict]:
    return list(csv.DictReader(Path(path).read_text().splitlines()))


def write_svg(cloud: OrbitCloud, path, box, title="", size=480) -> None:
    """Scatter plot of a cloud, one hue per seed, axes spanning ``box``."""
    box = np.asarray(box, dtype=float)
    pad = 30
    w = h = size
    (x0, x1), (y0, y1) = box

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (w - 2 * pad),
                h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
             f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" '
             'fill="none" stroke="black" stroke-width="1"/>',
             f'<text x="{w / 2}" y="18" font-size="13" text-anchor="middle">{title}</text>',
             f'<text x="{pad}" y="{h - 8}" font-size="10">{x0:.3g}</text>',
             f'<text x="{w - pad}" y="{h - 8}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="4" y="{h - pad}" font-size="10">{y0:.3g}</text>',
             f'<text x="4" y="{pad + 10}" font-size="10">{y1:.3g}</text>']
    k = max(len(cloud.orbits), 1)
    for sid, orb in enumerate(cloud.orbits):
        r, g, b = colorsys.hsv_to_rgb(sid / k, 0.85, 0.8)
        color = f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"
        dots = []
        for x in orb:
            if _in_box(x, box):
                cx, cy = px(x[0], x[1])
                dots.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="0.9"/>')
        parts.append(f'<g fill="{color}">' + "".join(dots) + "</g>")
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
