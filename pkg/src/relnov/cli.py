"""Command-line entry points: gen-data, train, eval, bench, ablate, ensemble.

Exit codes: 0 success, 2 usage / format / dimension errors, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cf
from .data import DataError, FormatError, benchmark_spec, generate_synthetic, read_embeddings, \
    write_embeddings
from .evaluation import (METRICS, MetricError, config_digest, ensemble_average, evaluate,
                         read_scores, report_from_scores, write_report, write_roc, write_scores)
from .model import (AGGREGATIONS, CheckpointError, ConfigError, RelationalModel, load_checkpoint,
                    save_checkpoint)
from .numerics import NumericError
from .training import HEAD_FOR_LOSS, LOSSES, OPTIMIZERS, train, write_trace

log = logging.getLogger("relnov")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SETTINGS = ("intra", "single-source", "multi-source")
BENCH_METHODS = ("relational", "inv_euclidean", "cosine")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config plumbing

# flag dest -> (section, key)
_FLAG_KEYS = {
    "setting": ("data", "setting"), "dims": ("data", "dims"),
    "known_classes": ("data", "known_classes"), "unknown_classes": ("data", "unknown_classes"),
    "samples_per_class": ("data", "samples_per_class"), "class_sep": ("data", "class_sep"),
    "rotation": ("data", "rotation"), "translation": ("data", "translation"),
    "feature_dim": ("model", "feature_dim"), "model_dim": ("model", "model_dim"),
    "num_blocks": ("model", "num_blocks"), "num_heads": ("model", "num_heads"),
    "mlp_ratio": ("model", "mlp_ratio"), "aggregation": ("model", "aggregation"),
    "iterations": ("train", "iterations"), "batch_size": ("train", "batch_size"),
    "lr": ("train", "base_lr"), "warmup_iters": ("train", "warmup_iters"),
    "optimizer": ("train", "optimizer"), "weight_decay": ("train", "weight_decay"),
    "loss": ("train", "loss"),
    "seeds": ("bench", "seeds"), "settings": ("bench", "settings"),
}


def resolve(args, sections, run_overrides=None, input_dim=None):
    """Merge config file, flags and derived values into {section: dataclass}."""
    raw = cf.read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {s: {} for s in sections}
    for dest, (section, key) in _FLAG_KEYS.items():
        if section in overrides and getattr(args, dest, None) is not None:
            overrides[section][key] = getattr(args, dest)
    seed = getattr(args, "seed", None)
    if seed is not None:
        for section in ("data", "model", "train"):
            if section in overrides:
                overrides[section]["seed"] = seed
    if "run" in overrides:
        overrides["run"].update(run_overrides or {})
    out = {}
    for section in sections:
        if section == "model":
            continue
        out[section] = cf.build_section(section, raw.get(section), overrides[section])
    if "model" in sections:
        mo = overrides["model"]
        if "train" in out:
            # the loss decides the head
            mo["head_mode"] = HEAD_FOR_LOSS[out["train"].loss]
        if input_dim is not None:
            mo["input_dim"] = input_dim
        out["model"] = cf.build_section("model", raw.get("model"), mo)
    return out


def _seeded(cfg_obj, seed):
    return dataclasses.replace(cfg_obj, seed=seed)


def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("RELNOV_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"RELNOV_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _digest(sections, metric=None):
    # digest only what determines the numbers, never paths or the output dir
    blob = {k: cf.as_dict({k: v})[k] for k, v in sections.items() if k in ("data", "model", "train")}
    if metric is not None:
        blob["metric"] = metric
    return config_digest(blob)


# ---------------------------------------------------------------- library-level runs


def synthetic_from(data_cfg, setting=None, seed=None):
    return benchmark_spec(setting or data_cfg.setting, seed=data_cfg.seed if seed is None else seed,
                          dims=data_cfg.dims, known=data_cfg.known_classes,
                          unknown=data_cfg.unknown_classes,
                          samples_per_class=data_cfg.samples_per_class,
                          class_sep=data_cfg.class_sep, rotation=data_cfg.rotation,
                          translation=data_cfg.translation)


def fit(support, model_cfg, train_cfg):
    model = RelationalModel(model_cfg)
    return train(model, support, train_cfg)


def run_bench(data_cfg, model_cfg, train_cfg, seeds=3, settings=SETTINGS):
    """Train and score every (setting, seed); baselines use the raw embeddings.

    Returns (per_seed_rows, mean_rows) with rows (method, setting, [seed,] auroc, fpr95).
    """
    per_seed = []
    for setting in settings:
        for seed in range(seeds):
            support, test = generate_synthetic(synthetic_from(data_cfg, setting, seed))
            mcfg = _seeded(model_cfg, seed)
            mcfg.input_dim = support.dim
            model, _ = fit(support, mcfg, _seeded(train_cfg, seed))
            for method in BENCH_METHODS:
                rep, _ = evaluate(support, test, method, model if method == "relational" else None,
                                  seed=seed)
                per_seed.append((method, setting, seed, rep.auroc, rep.fpr95))
                log.info("bench %s %s seed %d auroc %.4f fpr95 %.4f", setting, method, seed,
                         rep.auroc, rep.fpr95)
    means = []
    for method in BENCH_METHODS:
        for setting in settings:
            vals = np.array([r[3:] for r in per_seed if r[0] == method and r[1] == setting])
            means.append((method, setting, float(vals[:, 0].mean()), float(vals[:, 1].mean())))
    return per_seed, means


def order_gap(model, z_a, z_b):
    """Largest relative |s(a, b) - s(b, a)| over the given feature pairs."""
    model = model.astype(np.float64)
    la = model.feature_pair_logits(z_a, z_b).astype(np.float64)
    lb = model.feature_pair_logits(z_b, z_a).astype(np.float64)
    sa, sb = 1 / (1 + np.exp(-la)), 1 / (1 + np.exp(-lb))
    return float(np.max(np.abs(sa - sb) / np.maximum(sa, 1e-300)))


def run_ablation(data_cfg, model_cfg, train_cfg, seed=0, order_tol=1e-5):
    """Every aggregation x loss on one shared dataset.

    Rows: (aggregation, loss, auroc, fpr95, first loss, last loss, order_gap, order_sensitive).
    """
    support, test = generate_synthetic(synthetic_from(data_cfg, seed=seed))
    rng = np.random.default_rng(seed)
    rows = []
    for agg in AGGREGATIONS:
        for loss in LOSSES:
            mcfg = _seeded(model_cfg, seed)
            mcfg.input_dim, mcfg.aggregation, mcfg.head_mode = support.dim, agg, HEAD_FOR_LOSS[loss]
            tcfg = _seeded(train_cfg, seed)
            tcfg.loss = loss
            model, trace = fit(support, mcfg, tcfg)
            rep, _ = evaluate(support, test, "relational", model, seed=seed)
            z = model.features(test.features)
            idx = rng.integers(0, len(z), size=(2, 100))
            gap = order_gap(model, z[idx[0]], z[idx[1]])
            rows.append((agg, loss, rep.auroc, rep.fpr95, trace[0][1], trace[-1][1], gap,
                         gap > order_tol))
    return rows


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    out = _outdir(args)
    secs = resolve(args, ("run", "data"), {"command": "gen-data", "out": str(out),
                                          "threads": args.threads_resolved})
    spec = synthetic_from(secs["data"])
    support, test = generate_synthetic(spec)
    paths = out / "support.rsnd", out / "test.rsnd"
    write_embeddings(support, paths[0])
    write_embeddings(test, paths[1])
    cf.write_resolved(secs, out)
    for p, d in zip(paths, (support, test)):
        print(f"{p}\t{len(d)} samples")
    return EXIT_OK


def cmd_train(args):
    out = _outdir(args)
    support = read_embeddings(_require_file(args.support, "support"))
    secs = resolve(args, ("run", "model", "train"),
                   {"command": "train", "support": str(args.support), "out": str(out),
                    "threads": args.threads_resolved}, input_dim=support.dim)
    model = RelationalModel(secs["model"])
    cf.write_resolved(secs, out)
    model, trace = train(model, support, secs["train"])
    save_checkpoint(model, out / "model.rsnm")
    write_trace(trace, out / "loss.csv")
    print(f"{out / 'model.rsnm'}\tfinal loss {trace[-1][1]:.6f}")
    return EXIT_OK


def cmd_eval(args):
    out = _outdir(args)
    support = read_embeddings(_require_file(args.support, "support"))
    test = read_embeddings(_require_file(args.test, "test"))
    model = None
    if args.checkpoint:
        model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    elif args.metric == "relational":
        raise UsageError("--metric relational needs --checkpoint")
    if model is not None and model.config.input_dim != support.dim:
        raise DataError(f"checkpoint expects {model.config.input_dim} features, "
                        f"support has {support.dim}")
    secs = resolve(args, ("run",), {"command": "eval", "support": str(args.support),
                                    "test": str(args.test), "checkpoint": str(args.checkpoint or ""),
                                    "metric": args.metric, "out": str(out),
                                    "threads": args.threads_resolved})
    if model is not None:
        secs["model"] = model.config
    digest = _digest(secs, args.metric)
    report, scores = evaluate(support, test, args.metric, model, seed=args.seed or 0)
    report.config_digest = digest
    cf.write_resolved(secs, out)
    write_report(report, out / "metrics.json")
    write_scores(scores, out / "scores.csv")
    write_roc(report.roc_points, out / "roc.csv")
    print(report.to_json())
    return EXIT_OK


def cmd_bench(args):
    out = _outdir(args)
    secs = resolve(args, ("run", "data", "model", "train", "bench"),
                   {"command": "bench", "out": str(out), "threads": args.threads_resolved})
    cf.write_resolved(secs, out)
    settings = secs["bench"].setting_list
    bad = [s for s in settings if s not in SETTINGS]
    if bad:
        raise UsageError(f"unknown setting(s): {', '.join(bad)}")
    per_seed, means = run_bench(secs["data"], secs["model"], secs["train"],
                                secs["bench"].seeds, settings)
    with open(out / "bench_per_seed.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "setting", "seed", "auroc", "fpr95"])
        for m, s, seed, a, f in per_seed:
            w.writerow([m, s, seed, repr(a), repr(f)])
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "setting", "auroc", "fpr95"])
        for m, s, a, f in means:
            w.writerow([m, s, repr(a), repr(f)])
    table = bench_markdown(means, settings)
    (out / "bench.md").write_text(table)
    print(table, end="")
    return EXIT_OK


def bench_markdown(means, settings):
    lookup = {(m, s): (a, f) for m, s, a, f in means}
    lines = ["| method | " + " | ".join(f"{s} AUROC | {s} FPR95" for s in settings) + " |",
             "|---" * (1 + 2 * len(settings)) + "|"]
    for m in BENCH_METHODS:
        cells = []
        for s in settings:
            a, f = lookup[(m, s)]
            cells += [f"{a:.4f}", f"{f:.4f}"]
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    out = _outdir(args)
    secs = resolve(args, ("run", "data", "model", "train"),
                   {"command": "ablate", "out": str(out), "threads": args.threads_resolved})
    cf.write_resolved(secs, out)
    rows = run_ablation(secs["data"], secs["model"], secs["train"], seed=secs["data"].seed)
    header = ["aggregation", "loss", "auroc", "fpr95", "loss_first", "loss_last", "order_gap",
              "order_sensitive"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:7]] + [int(r[7])])
    for r in rows:
        flag = "order-sensitive" if r[7] else "order-invariant"
        print(f"{r[0]:<12}{r[1]:<10} auroc {r[2]:.4f}  fpr95 {r[3]:.4f}  {flag}")
    return EXIT_OK


def cmd_ensemble(args):
    out = _outdir(args)
    a = read_scores(_require_file(args.scores_a, "scores_a"))
    b = read_scores(_require_file(args.scores_b, "scores_b"))
    labels = None
    if args.test:
        test = read_embeddings(_require_file(args.test, "test"))
        if len(test) != len(a):
            raise UsageError(f"test file has {len(test)} samples, scores have {len(a)}")
        labels = test.labels
    merged = ensemble_average(a, b, normalize=args.normalize)
    secs = resolve(args, ("run",), {"command": "ensemble", "normalize": args.normalize,
                                    "test": str(args.test or ""), "out": str(out),
                                    "threads": args.threads_resolved})
    # order-free digest so swapped inputs give identical reports
    inputs = sorted(hashlib.sha256(s.scores.tobytes()).hexdigest() for s in (a, b))
    digest = config_digest({"ensemble": inputs, "normalize": args.normalize})
    report = report_from_scores(merged, labels, seed=0, digest=digest)
    cf.write_resolved(secs, out)
    write_scores(merged, out / "scores.csv")
    write_report(report, out / "metrics.json")
    write_roc(report.roc_points, out / "roc.csv")
    print(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _add_common(p):
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, help="BLAS threads (env RELNOV_THREADS, default 1)")
    p.add_argument("--seed", type=int, help="seed for data, init and pair sampling")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p):
    p.add_argument("--setting", choices=SETTINGS)
    p.add_argument("--dims", type=int)
    p.add_argument("--known-classes", type=int)
    p.add_argument("--unknown-classes", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--class-sep", type=float)
    p.add_argument("--rotation", type=float, help="target-domain rotation in degrees")
    p.add_argument("--translation", type=float, help="target-domain shift per coordinate")


def _add_model_train(p):
    p.add_argument("--aggregation", choices=AGGREGATIONS)
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--model-dim", type=int)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-iters", type=int)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--weight-decay", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="relnov", description="relational novelty detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic support/test embedding files")
    _add_common(p)
    _add_data(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a relational model on a support file")
    _add_common(p)
    p.add_argument("--support", required=True)
    _add_model_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a test file against support prototypes")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--support", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", choices=METRICS, default="relational")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="relational vs baselines over synthetic settings")
    _add_common(p)
    _add_data(p)
    _add_model_train(p)
    p.add_argument("--seeds", type=int, help="number of seeds to average")
    p.add_argument("--settings", help="comma separated settings")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="aggregation x loss ablation")
    _add_common(p)
    _add_data(p)
    _add_model_train(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ensemble", help="average two score files")
    _add_common(p)
    p.add_argument("scores_a")
    p.add_argument("scores_b")
    p.add_argument("--test", help="embedding file with the true labels (enables acc / H-score)")
    p.add_argument("--normalize", action="store_true", help="min-max scale each input first")
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.threads_resolved = _threads(args)
        with threadpool_limits(limits=args.threads_resolved):
            return args.func(args)
    except NumericError as exc:
        print(f"relnov: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DataError, FormatError, ConfigError, CheckpointError, MetricError,
            cf.ConfigFileError, OSError, ValueError) as exc:
        print(f"relnov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
