"""``revsym`` command line: gen-data, train, check, eval, iterate, info.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
3 structural-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SECTIONS, ConfigError, RunConfig, field_types, load_config
from .dynamics import Dataset, DynamicsError, generate_dataset, system_from_meta
from .evaluation import compare_report, domain_samples, inflate_box, iterate, residual_samples
from .reversible import Involution, Kind, Model, build_model, inverse_residual, parse_kind, \
    reversibility_residual, symplecticity_residual
from .training import TrainingDivergedError, default_scale, split_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_STRUCTURE = 0, 1, 2, 3

REVERSIBILITY_BOUND = 1e-11
SYMPLECTICITY_BOUND = 1e-10
INVERSE_BOUND = 1e-11


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_value(raw: str, typ):
    if typ == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ is None:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {typ.__name__}") from None


# short flags that appear in the usage examples, mapped to config keys
SHORTCUTS = {
    "gen-data": {"system": [("system", "name")], "n": [("system", "n")],
                 "seed": [("system", "seed")]},
    "train": {"model": [("model", "kind")], "depth": [("model", "depth")],
              "layers": [("model", "depth")], "degree": [("model", "degree")],
              "sublayers": [("model", "sublayers")], "epochs": [("training", "epochs")],
              "seed": [("model", "seed"), ("training", "seed")]},
    "eval": {"system": [("system", "name")]},
    "iterate": {"system": [("system", "name")]},
}


def _add_config_flags(p, command):
    p.add_argument("--config", help="TOML run configuration")
    g = p.add_argument_group("config overrides (--section-key VALUE)")
    for section in SECTIONS:
        for name, (key, _) in field_types(section).items():
            flag = f"--{section}-{key.replace('_', '-')}"
            g.add_argument(flag, dest=f"cfg__{section}__{name}", metavar="VALUE")
    for short in SHORTCUTS.get(command, {}):
        p.add_argument(f"--{short}", dest=f"short__{short}", metavar="VALUE")


def _effective_config(args, command) -> RunConfig:
    cfg = load_config(args.config)
    for section in SECTIONS:
        types = field_types(section)
        for name, (_, typ) in types.items():
            raw = getattr(args, f"cfg__{section}__{name}", None)
            if raw is not None:
                cfg.set(section, name, _parse_value(raw, typ))
    for short, targets in SHORTCUTS.get(command, {}).items():
        raw = getattr(args, f"short__{short}", None)
        if raw is None:
            continue
        for section, name in targets:
            cfg.set(section, name, _parse_value(raw, field_types(section)[name][1]))
    return cfg.validate()


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_manifest(path, command, argv, cfg, extra):
    manifest = {"command": command, "argv": argv, "version": __version__,
                "config": cfg.to_dict(), **extra}
    Path(path).write_text(json.dumps(manifest, indent=1, default=str) + "\n")


# ---------------------------------------------------------------------------


def cmd_gen_data(args, argv):
    cfg = _effective_config(args, "gen-data")
    system = cfg.system.build()
    n = cfg.system.default_n()
    out = Path(args.out) if args.out else Path(cfg.paths.out_dir) / "dataset.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        ds = generate_dataset(system, n, cfg.system.seed, cfg.system.integrator())
    except DynamicsError as err:
        print(f"gen-data: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    ds.save(out)
    attempts = ds.meta["attempts"]
    print(f"wrote {out}: N={len(ds)} ({attempts - len(ds)} of {attempts} candidates rejected)")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", argv, cfg,
                    {"outputs": [str(out)], "rejected": attempts - len(ds)})
    return EXIT_OK


def _model_from_config(cfg: RunConfig, ds: Dataset) -> Model:
    m = cfg.model
    scale = default_scale(m.kind, ds) if m.scale == "auto" else float(m.scale)
    meta = {k: ds.meta[k] for k in ("system", "lambda", "energy", "nu", "region") if k in ds.meta}
    meta["creation_config"] = cfg.to_dict()["model"]
    return build_model(parse_kind(m.kind), ds.dim, m.seed, depth=m.depth, degree=m.degree,
                       hidden=tuple(m.hidden), mlp_width=m.width, sublayers=m.sublayers,
                       scale=scale, henon_init=m.henon_init, meta=meta)


def cmd_train(args, argv):
    cfg = _effective_config(args, "train")
    try:
        data = Path(args.dataset).read_bytes()
        ds = Dataset.load(args.dataset)
    except (OSError, ValueError) as err:
        print(f"train: cannot read dataset: {err}", file=sys.stderr)
        return EXIT_USAGE
    model = _model_from_config(cfg, ds)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.training.train_config()
    print(f"training {model.kind.value} ({model.n_params} parameters) on {len(ds)} pairs "
          f"for {tcfg.epochs} epochs")
    t0 = time.perf_counter()
    status = EXIT_OK
    try:
        trained, history, state = train(model, ds, tcfg)
    except TrainingDivergedError as err:
        print(f"train: diverged: {err}", file=sys.stderr)
        trained, history, state = err.model or model, err.history, None
        status = EXIT_NUMERICAL
    elapsed = time.perf_counter() - t0
    trained.save(out / "model.json")
    history.save(out / "history.csv", include_time=cfg.training.record_time)
    if state is not None:
        (out / "optimizer.json").write_text(json.dumps(state.to_dict()) + "\n")
    extra = {"dataset": str(args.dataset), "dataset_hash": git_blob_hash(data),
             "elapsed_seconds": elapsed, "status": status,
             "outputs": [str(out / f) for f in ("model.json", "history.csv", "optimizer.json")]}
    if len(history):
        extra.update(initial_train_loss=history.train_loss[0], final_train_loss=history.train_loss[-1],
                     final_val_loss=history.val_loss[-1])
        print(f"train loss {history.train_loss[0]:.4g} -> {history.train_loss[-1]:.4g}, "
              f"val loss {history.val_loss[-1]:.4g}")
    _write_manifest(out / "manifest.json", "train", argv, cfg, extra)
    return status


def structural_check(model: Model, samples) -> tuple[dict, bool]:
    """Residuals plus whether they meet the bounds the model's kind guarantees."""
    res, ok = {}, True
    # kinds without a built-in involution are measured against the momentum flip
    R = model.involution
    if R is None and model.dim % 2 == 0:
        R = Involution.momentum_flip(model.dim)
    with np.errstate(all="ignore"):
        if R is not None:
            res["reversibility"] = reversibility_residual(model, samples, R)
        if model.dim % 2 == 0:
            res["symplecticity"] = symplecticity_residual(model, samples)
        if model.kind != Kind.MLP_BASELINE:
            res["inverse"] = inverse_residual(model, samples)
    gates = {}
    if model.kind.reversible:
        gates["reversibility"] = REVERSIBILITY_BOUND
    if model.kind in (Kind.REVERSIBLE_HENON, Kind.SYMPNET):
        gates["symplecticity"] = SYMPLECTICITY_BOUND
    if model.kind != Kind.MLP_BASELINE:
        gates["inverse"] = INVERSE_BOUND
    for k, bound in gates.items():
        if not res[k] <= bound:
            ok = False
    return {"residuals": res, "bounds": gates}, ok


def cmd_check(args, argv):
    try:
        model = Model.load(args.model)
    except (OSError, ValueError, KeyError, TypeError) as err:
        print(f"check: cannot parse model file {args.model}: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        samples = domain_samples(system_from_meta(model.meta), args.samples, args.seed)
    except (KeyError, ValueError, TypeError):
        # no usable system metadata: fall back to the recorded box or [-1, 1]^d
        region = model.meta.get("region") or [[-1.0, 1.0]] * model.dim
        samples = residual_samples(region, args.samples, args.seed)
    report, ok = structural_check(model, samples)
    report.update(model=str(args.model), kind=model.kind.value, samples=args.samples, passed=ok,
                  gated=bool(report["bounds"]))
    for k, v in report["residuals"].items():
        bound = report["bounds"].get(k)
        tag = "ungated" if bound is None else ("ok" if v <= bound else "FAIL")
        print(f"{k:15s} {v:.3e}  {tag}" + ("" if bound is None else f" (bound {bound:g})"))
    if not report["bounds"]:
        print("baseline model: residuals are informational, no structural claim")
    out = Path(args.out) if args.out else Path(str(args.model) + ".check.json")
    out.write_text(json.dumps(report, indent=1) + "\n")
    return EXIT_OK if ok else EXIT_STRUCTURE


def _load_models(items):
    models = {}
    for item in items:
        name, _, path = item.rpartition("=")
        if item == "truth":
            models["truth"] = "truth"
            continue
        path = path or item
        name = name or Path(path).parent.name or Path(path).stem
        if name in models:
            name = f"{name}_{len(models)}"
        models[name] = Model.load(path)
    return models


def cmd_eval(args, argv):
    cfg = _effective_config(args, "eval")
    system = cfg.system.build()
    try:
        models = _load_models(args.models)
    except (OSError, ValueError, KeyError) as err:
        print(f"eval: {err}", file=sys.stderr)
        return EXIT_USAGE
    dims = {m.dim for m in models.values() if isinstance(m, Model)} | {system.dim}
    if len(dims) != 1:
        print(f"eval: incompatible dimensions {sorted(dims)}", file=sys.stderr)
        return EXIT_USAGE
    val = None
    if args.dataset:
        ds = Dataset.load(args.dataset)
        _, val = split_dataset(ds, cfg.training.split_ratio, cfg.training.seed)
    ev = cfg.evaluation
    box = ev.box if ev.box is not None else inflate_box(system.region, ev.box_inflation)
    out = Path(args.out) if args.out else Path(cfg.paths.out_dir) / "eval"
    models = {k: (system if v == "truth" else v) for k, v in models.items()}
    try:
        rows = compare_report(models, system, out, val_ds=val, n_cloud=ev.cloud_iterations,
                              n_cloud_seeds=ev.cloud_seeds, n_err=ev.error_iterations,
                              n_err_orbits=ev.error_orbits, box=box, cfg=cfg.system.integrator())
    except DynamicsError as err:
        print(f"eval: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    for r in rows:
        print(f"{r['name']:12s} err@10={r['err_iter_10']:.3e} "
              f"rev={r['reversibility_residual']:.2e} symp={r['symplecticity_residual']:.2e} "
              f"in-box={r['cloud_in_box_fraction']:.3f}")
    _write_manifest(out / "manifest.json", "eval", argv, cfg,
                    {"models": list(args.models), "dataset": args.dataset})
    return EXIT_OK


def cmd_iterate(args, argv):
    cfg = _effective_config(args, "iterate")
    target = system = cfg.system.build()
    if args.model != "truth":
        try:
            target = Model.load(args.model)
        except (OSError, ValueError, KeyError) as err:
            print(f"iterate: {err}", file=sys.stderr)
            return EXIT_USAGE
    x0 = np.array([float(v) for v in args.x0.split(",")])
    box = None if args.no_box else inflate_box(system.region, cfg.evaluation.box_inflation)
    orbit, truncated = iterate(target, x0, args.n, box, cfg.system.integrator())
    lines = ["iter," + ",".join(f"c{i + 1}" for i in range(len(x0)))]
    lines += [f"{k}," + ",".join(repr(float(v)) for v in x) for k, x in enumerate(orbit)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if truncated:
        print(f"orbit truncated after {len(orbit) - 1} iterations", file=sys.stderr)
    return EXIT_OK


def cmd_info(args, argv):
    path = Path(args.path)
    try:
        if path.suffix == ".json":
            m = Model.load(path)
            info = {"kind": m.kind.value, "dim": m.dim, "n_params": m.n_params, "scale": m.scale,
                    "layers": len(m.layers), "meta": m.meta}
        else:
            ds = Dataset.load(path)
            info = {"N": len(ds), "dim": ds.dim, "meta": ds.meta}
    except (OSError, ValueError, KeyError) as err:
        print(f"info: {err}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(info, indent=1, default=str))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="revsym", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="sample a ground-truth dataset")
    _add_config_flags(s, "gen-data")
    s.add_argument("--out", help="dataset CSV path (default OUT_DIR/dataset.csv)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--dataset", required=True)
    _add_config_flags(s, "train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("check", help="structural residuals of a model file")
    s.add_argument("model")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("eval", help="compare models against the ground truth")
    s.add_argument("models", nargs="+", help="model files as [name=]path, or 'truth'")
    s.add_argument("--dataset", help="dataset whose validation split is scored")
    s.add_argument("--out", help="output directory (default OUT_DIR/eval)")
    _add_config_flags(s, "eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("iterate", help="iterate a model file or the ground truth")
    s.add_argument("model", help="model file or 'truth'")
    s.add_argument("--x0", required=True, help="comma-separated initial point")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--no-box", action="store_true", help="do not truncate at the evaluation box")
    s.add_argument("--out")
    _add_config_flags(s, "iterate")
    s.set_defaults(func=cmd_iterate)

    s = sub.add_parser("info", help="describe a model or dataset file")
    s.add_argument("path")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except ConfigError as err:
        print(f"revsym {args.command}: config error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
