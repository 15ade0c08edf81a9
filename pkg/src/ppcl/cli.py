"""Command-line entry points.

Subcommands: synth, train, eval, ablate, project, stats, gradcheck.
Configuration is flat key=value files plus --set overrides; every run echoes
its effective configuration into the output directory so it can be reproduced
exactly. Report commands write tab-separated tables and render matching
figures next to them.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import figures, gradcheck
from .data import (STATS_HEADERS, SyntheticSpec, factor_stats,
                   generate_synthetic, load_dataset, save_dataset, write_table)
from .errors import ConfigError, DataError
from .model import ModelConfig, PPCLModel
from .training import (TrainConfig, ablate, evaluate, load_checkpoint,
                       results_table, save_checkpoint, train)

OUT_ROOT_ENV = "PPCL_OUT_ROOT"


# -- flat key=value config handling ----------------------------------------

def _parse_value(raw: str, pytype):
    raw = raw.strip()
    if pytype is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if pytype is int:
        return int(raw)
    if pytype is float:
        return float(raw)
    if pytype is tuple:
        return tuple(float(x) if "." in x or "e" in x.lower() else int(x)
                     for x in raw.split(","))
    return raw


def _field_types(cls):
    return {f.name: (tuple if f.type == "tuple" else type(f.default))
            for f in dataclasses.fields(cls)}


def load_config(cls, path=None, overrides=()):
    """Build a dataclass config from a key=value file plus overrides."""
    types = _field_types(cls)
    values = {}

    def take(line, where):
        line = line.split("#", 1)[0].strip()
        if not line:
            return
        if "=" not in line:
            raise ConfigError(f"{where}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        values[key] = _parse_value(raw, types[key])

    if path:
        with open(path) as f:
            for i, line in enumerate(f, 1):
                take(line, f"{path}:{i}")
    for ov in overrides:
        take(ov, "--set")
    return cls(**values)


def dump_config(cfg, path):
    with open(path, "w") as f:
        for fld in dataclasses.fields(cfg):
            v = getattr(cfg, fld.name)
            if isinstance(v, tuple):
                v = ",".join(_num(x) for x in v)
            f.write(f"{fld.name} = {v}\n")


def _num(x):
    return f"{x:.12g}" if isinstance(x, float) else str(x)


def _out_dir(args, command):
    if args.out:
        return args.out
    root = os.environ.get(OUT_ROOT_ENV)
    if not root:
        raise ConfigError(f"--out not given and {OUT_ROOT_ENV} unset")
    return os.path.join(root, command)


def _log_to(path):
    f = open(path, "a")

    def log(msg):
        print(msg)
        f.write(msg + "\n")
        f.flush()

    return log


# -- subcommands ------------------------------------------------------------

def cmd_synth(args):
    spec = load_config(SyntheticSpec, args.spec, args.set)
    out = _out_dir(args, "synth")
    os.makedirs(out, exist_ok=True)
    dataset = generate_synthetic(spec)
    save_dataset(dataset, out, inline_features=args.inline_features)
    dump_config(spec, os.path.join(out, "spec.txt"))
    print(f"wrote {len(dataset.posts)} posts / {len(dataset.users)} users to {out}")


def cmd_train(args):
    cfg = load_config(TrainConfig, args.config, args.set)
    out = _out_dir(args, "train")
    os.makedirs(out, exist_ok=True)
    dump_config(cfg, os.path.join(out, "config.txt"))
    dataset = load_dataset(args.data)
    log = _log_to(os.path.join(out, "train.log"))
    result = train(dataset, cfg, log=log)

    save_checkpoint(result.model, os.path.join(out, "checkpoint.ckpt"))
    hist_fields = ["epoch", "total", "l_reg", "l_crd", "l_uisd", "l_uid",
                   "l_rnc", "val_loss", "fallback_relaxed", "fallback_self_dup"]
    write_table(os.path.join(out, "history.tsv"), hist_fields,
                [[h[k] for k in hist_fields] for h in result.history])
    figures.render_history(result.history, os.path.join(out, "history.png"))
    write_table(os.path.join(out, "clusters.tsv"), ["user_id", "cluster_id"],
                sorted(result.clustering.assignment.items()))

    rows = []
    for split in ("val", "test"):
        rep = evaluate(result.model, result.arrays[split])
        rows.append([split, rep.mae, rep.mse, rep.src])
        log(f"{split}: MAE {rep.mae:.4f} MSE {rep.mse:.4f} SRC {rep.src:.4f}")
    write_table(os.path.join(out, "metrics.tsv"),
                ["split", "mae", "mse", "src"], rows)
    log(f"best epoch {result.best_epoch} (val loss {result.best_val:.6f})")


def _restore(args):
    """Rebuild dataset splits and the trained model from a run directory."""
    cfg = load_config(TrainConfig, os.path.join(args.run, "config.txt"))
    dataset = load_dataset(args.data)
    tr, va, te = dataset.split()
    arrays = {"train": dataset.materialize(tr), "val": dataset.materialize(va),
              "test": dataset.materialize(te)}
    d_r = arrays["train"].image.shape[1]
    d_b = cfg.d_b if cfg.d_b < d_r else max(1, d_r // 2)
    model = PPCLModel(ModelConfig(d_r=d_r, d_b=d_b, d_h=cfg.d_h, d_M=cfg.d_M,
                                  l_cross=cfg.l_cross, dropout=cfg.dropout),
                      dataset.field_vocab_sizes(), seed=cfg.seed)
    load_checkpoint(model, os.path.join(args.run, "checkpoint.ckpt"))
    return cfg, dataset, arrays, model


def cmd_eval(args):
    _, _, arrays, model = _restore(args)
    rep = evaluate(model, arrays[args.split])
    print(f"MAE {rep.mae:.6f}")
    print(f"MSE {rep.mse:.6f}")
    print(f"SRC {rep.src:.6f}")


def cmd_ablate(args):
    cfg = load_config(TrainConfig, args.config, args.set)
    out = _out_dir(args, "ablate")
    os.makedirs(out, exist_ok=True)
    dump_config(cfg, os.path.join(out, "config.txt"))
    dataset = load_dataset(args.data)
    log = _log_to(os.path.join(out, "ablate.log"))
    batch_sizes = [int(b) for b in args.batch_sizes.split(",")] if args.batch_sizes else []
    results = ablate(dataset, cfg, batch_sizes=batch_sizes, log=log)
    header, rows = results_table(results)
    write_table(os.path.join(out, "ablation.tsv"), header, rows)
    figures.render_ablation([(r[0], r[1]) for r in rows],
                            os.path.join(out, "ablation.png"))
    for row in rows:
        log("%-18s MAE %.4f MSE %.4f SRC %.4f" % tuple(row))


def cmd_project(args):
    _, _, arrays, model = _restore(args)
    out = _out_dir(args, "project")
    os.makedirs(out, exist_ok=True)
    split = arrays[args.split]
    fpop = np.concatenate([
        model.f_pop_eval(split, np.arange(i, min(i + 2048, len(split))))
        for i in range(0, len(split), 2048)])
    centered = fpop - fpop.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((svals > 1e-12).sum())
    if rank < 2:
        print(f"warning: feature matrix rank {rank} < 2, emitting {rank} components",
              file=sys.stderr)
    ncomp = min(2, max(rank, 1))
    coords = centered @ vt[:ncomp].T
    if ncomp < 2:
        coords = np.hstack([coords, np.zeros((len(coords), 2 - ncomp))])
    write_table(os.path.join(out, "projection.tsv"), ["x", "y", "label"],
                [[float(c[0]), float(c[1]), float(l)]
                 for c, l in zip(coords, split.labels)])
    write_table(os.path.join(out, "singular_values.tsv"),
                ["rank", "sigma"],
                [[i, float(s)] for i, s in enumerate(svals)])
    figures.render_projection(coords, split.labels,
                              os.path.join(out, "projection.png"))
    if svals.size >= 2 and svals[0] > 0:
        print(f"sigma2/sigma1 = {svals[1] / svals[0]:.6f}")


def cmd_stats(args):
    dataset = load_dataset(args.data)
    out = _out_dir(args, "stats")
    os.makedirs(out, exist_ok=True)
    stats = factor_stats(dataset, n_groups=args.groups, seed=args.seed)
    paths = {}
    for key in ("category", "user", "influence"):
        write_table(os.path.join(out, f"{key}_stats.tsv"),
                    STATS_HEADERS[key], stats[key])
        paths[key] = os.path.join(out, f"{key}_stats.png")
    figures.render_stats(stats, paths)
    print(f"wrote factor statistics to {out}")


def cmd_gradcheck(args):
    ok = gradcheck.run(tolerance=args.tolerance, seed=args.seed)
    if not ok:
        sys.exit(1)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="ppcl",
                                 description="popularity prediction with "
                                             "contrastive auxiliary tasks")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="key=value spec file")
    p.add_argument("--set", action="append", default=[], metavar="K=V")
    p.add_argument("--out")
    p.add_argument("--inline-features", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="K=V")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation row set")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="K=V")
    p.add_argument("--batch-sizes", help="comma list for the sweep")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("project", help="2-D SVD projection of the popularity features")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("stats", help="exploratory factor statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--groups", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    args = ap.parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
