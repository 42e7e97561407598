"""``protoreid`` command line: train, eval, sweep, inspect, extract, rerank, synth."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigValidationError, RunConfig, override
from .container import ContainerError, load_features, save_container, save_features
from .data import DataError, save_image_folder
from .evaluation import EvaluationError, ablate_prototypes, distance_matrix, evaluate, extract_features, rerank
from .nets import ConfigError
from .pipeline import (
    bank_of,
    evaluate_model,
    load_dataset,
    mean_std,
    model_from_checkpoint,
    raw_kind,
    retrieval_metrics,
    split_features,
    train_run,
)
from .prototypes import top_prototypes
from .train import TrainingError

logger = logging.getLogger("protoreid")

METRIC_FIELDS = ["mAP", "rank1", "rank5", "rank10", "num_valid_queries", "num_skipped_queries"]
SWEEP_AXES = {
    "margin": "triplet.margin",
    "parts": "parts.num_parts",
    "pooling": "pooling",
    "image_size": None,
    "prototype_fraction": None,
}


def write_csv(path: Path, rows: list[dict], fields: list[str] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})
    return path


def line_plot(path: Path, xs, ys, yerr=None, xlabel="", ylabel="mAP", title="") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    positions = list(range(len(xs))) if any(isinstance(x, str) for x in xs) else list(xs)
    ax.errorbar(positions, ys, yerr=yerr, marker="o", capsize=3)
    ax.set_xticks(positions)
    ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ---------------------------------------------------------------- config


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigValidationError([f"--set {item!r}: expected key=value"])
        key, value = item.split("=", 1)
        cfg = override(cfg, key, parse_value(value))
    if args.seed is not None:
        cfg = override(cfg, "seed", args.seed)
    if args.deterministic is not None:
        cfg = override(cfg, "optim.deterministic", args.deterministic)
    if args.out is not None:
        cfg = override(cfg, "output_dir", str(args.out))
    cfg.validate()
    return cfg


def out_dir(args, default: Path) -> Path:
    path = Path(args.out) if args.out is not None else default
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_eval_dataset(args, cfg: RunConfig):
    if getattr(args, "dataset", None):
        cfg = override(cfg, "dataset", {"synthetic": None, "folder": args.dataset, "manifest": None})
    return load_dataset(cfg), cfg


# ---------------------------------------------------------------- commands


def cmd_train(args) -> Path:
    cfg = resolve_config(args)
    run_dir = Path(cfg.output_dir)
    trainer = train_run(cfg, run_dir=run_dir)
    last = trainer.log[-1] if trainer.log else {}
    print(f"trained {trainer.epoch} epochs, final loss {last.get('L_total', float('nan')):.4f}; run dir {run_dir}")
    return run_dir


def cmd_eval(args) -> Path:
    model, cfg = model_from_checkpoint(args.checkpoint)
    dataset, cfg = load_eval_dataset(args, cfg)
    dest = out_dir(args, Path(args.checkpoint).parent / "eval")
    kinds = args.kind or [cfg.eval.feature_kind]
    rows = []
    for kind in kinds:
        model.check_kind(kind)
        rows.append({"kind": kind, "rerank": "none", **evaluate_model(model, dataset, kind, cfg.eval.batch_size)})
        if args.rerank is not None:
            k1, k2, lam = int(args.rerank[0]), int(args.rerank[1]), float(args.rerank[2])
            m = evaluate_model(model, dataset, kind, cfg.eval.batch_size, rerank_args=(k1, k2, lam))
            rows.append({"kind": kind, "rerank": f"k1={k1} k2={k2} lambda={lam}", **m})
    cfg.save(dest / "config.json")
    write_csv(dest / "eval.csv", rows, ["kind", "rerank"] + METRIC_FIELDS)
    for r in rows:
        print(f"{r['kind']:>10} {r['rerank']:>24}  mAP {r['mAP']:.4f}  R1 {r['rank1']:.4f}  R5 {r['rank5']:.4f}  R10 {r['rank10']:.4f}")
    return dest


def _sweep_point(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "image_size":
        h, w = (int(v) for v in str(value).lower().split("x"))
        cfg = override(cfg, "backbone.input_size", [h, w])
        if cfg.dataset.synthetic is not None:
            syn = cfg.to_dict()["dataset"]["synthetic"]
            syn.update(image_height=h, image_width=w)
            cfg = override(cfg, "dataset.synthetic", syn)
        return cfg
    return override(cfg, SWEEP_AXES[axis], value)


def cmd_sweep(args) -> Path:
    base = resolve_config(args)
    dest = out_dir(args, Path(base.output_dir) / f"sweep_{args.axis}")
    seeds = args.seeds or [base.seed]
    values = [parse_value(v) for v in args.values]
    if args.axis == "image_size":
        values = [str(v) for v in args.values]
    base.save(dest / "config.json")
    per_run = []
    if args.axis == "prototype_fraction":
        for v in values:
            if not (isinstance(v, (int, float)) and 0 < v <= 1):
                raise ConfigValidationError([f"prototype_fraction value {v!r} must lie in (0, 1]"])
        for seed in seeds:
            cfg = override(base, "seed", seed)
            dataset = load_dataset(cfg)
            trainer = train_run(cfg, dataset, run_dir=dest / f"seed{seed}")
            (qf, qp, qc), (gf, gp, gc) = split_features(trainer.model, dataset, raw_kind(cfg))
            rows = ablate_prototypes(bank_of(trainer.model), qf, gf, qp, gp, qc, gc, values, args.subset_seeds)
            for r in rows:
                per_run.append({"value": r["fraction"], "train_seed": seed, "subset_seed": r["seed"], **r})
        write_csv(
            dest / "subsets.csv", per_run, ["value", "train_seed", "subset_seed", "num_prototypes", "mAP", "rank1", "indices"]
        )
    else:
        for v in values:
            for seed in seeds:
                cfg = override(_sweep_point(base, args.axis, v), "seed", seed)
                dataset = load_dataset(cfg)
                run = dest / f"{args.axis}={v}" / f"seed{seed}"
                trainer = train_run(cfg, dataset, run_dir=run)
                m = evaluate_model(trainer.model, dataset, cfg.eval.feature_kind, cfg.eval.batch_size)
                per_run.append({"value": v, "train_seed": seed, **m})
        write_csv(dest / "runs.csv", per_run, ["value", "train_seed"] + METRIC_FIELDS)
    summary = []
    for v in values:
        hits = [r for r in per_run if r["value"] == v]
        m_mean, m_std = mean_std([r["mAP"] for r in hits])
        r_mean, r_std = mean_std([r["rank1"] for r in hits])
        summary.append(
            {"axis": args.axis, "value": v, "n": len(hits), "mAP_mean": m_mean, "mAP_std": m_std, "rank1_mean": r_mean, "rank1_std": r_std}
        )
    write_csv(dest / "sweep.csv", summary)
    line_plot(
        dest / "sweep.png",
        [s["value"] for s in summary],
        [s["mAP_mean"] for s in summary],
        [s["mAP_std"] for s in summary],
        xlabel=args.axis,
    )
    for s in summary:
        print(f"{args.axis}={s['value']}: mAP {s['mAP_mean']:.4f} ± {s['mAP_std']:.4f} (n={s['n']})")
    return dest


def cmd_inspect(args) -> Path:
    model, cfg = model_from_checkpoint(args.checkpoint)
    dataset, cfg = load_eval_dataset(args, cfg)
    query, gallery = dataset.split("query"), dataset.split("gallery")
    if not 0 <= args.query_index < len(query):
        raise IndexError(f"query index {args.query_index} outside [0, {len(query)})")
    kind = raw_kind(cfg) + "_s"
    qf, qp, qc = extract_features(model, query, kind)
    gf, gp, gc = extract_features(model, gallery, kind)
    i = args.query_index
    d = distance_matrix(qf[i : i + 1], gf)[0]
    keep = ~(((gp == qp[i]) & (gc == qc[i])) | (gp == -1))
    order = [j for j in np.argsort(d, kind="stable") if keep[j]]
    if args.k > len(order) or args.k > qf.shape[1]:
        raise IndexError(f"k={args.k} exceeds the {len(order)} filtered gallery items or {qf.shape[1]} prototypes")
    dest = out_dir(args, Path(args.checkpoint).parent / f"inspect_q{i}")
    matches = [
        {"rank": r + 1, "gallery_index": int(j), "pid": int(gp[j]), "camid": int(gc[j]), "distance": float(d[j]), "correct": int(gp[j] == qp[i])}
        for r, j in enumerate(order[: args.k])
    ]
    protos = [{"rank": r + 1, "prototype": j, "score": s} for r, (j, s) in enumerate(top_prototypes(qf[i], args.k))]
    cfg.save(dest / "config.json")
    write_csv(dest / "matches.csv", matches)
    write_csv(dest / "prototypes.csv", protos)
    print(f"query {i} pid {int(qp[i])} cam {int(qc[i])}")
    for m in matches:
        print(f"  #{m['rank']:<3d} gallery {m['gallery_index']:<5d} pid {m['pid']:<5d} d={m['distance']:.4f} {'ok' if m['correct'] else 'x'}")
    return dest


def cmd_extract(args) -> Path:
    model, cfg = model_from_checkpoint(args.checkpoint)
    dataset, cfg = load_eval_dataset(args, cfg)
    kind = args.kind or cfg.eval.feature_kind
    dest = out_dir(args, Path(args.checkpoint).parent / f"features_{kind}")
    for split in ("query", "gallery"):
        feats, pids, camids = extract_features(model, dataset.split(split), kind, cfg.eval.batch_size)
        save_features(dest / split, feats, pids, camids, {"kind": kind, "split": split})
    cfg.save(dest / "config.json")
    print(f"wrote {kind} features to {dest}")
    return dest


def cmd_rerank(args) -> Path:
    qf, qp, qc, qmeta = load_features(args.query)
    gf, gp, gc, _ = load_features(args.gallery)
    dest = out_dir(args, Path(args.query).parent / "rerank")
    base = retrieval_metrics(qf, gf, qp, gp, qc, gc)
    dist = rerank(qf, gf, args.k1, args.k2, args.lam)
    res = evaluate(dist, qp, gp, qc, gc, max_rank=10)
    rows = [
        {"rerank": "none", **base},
        {
            "rerank": f"k1={args.k1} k2={args.k2} lambda={args.lam}", "mAP": res.mAP, "rank1": res.rank(1),
            "rank5": res.rank(5), "rank10": res.rank(10), "num_valid_queries": res.num_valid, "num_skipped_queries": res.num_skipped,
        },
    ]
    save_container(dest / "distances", {"distances": dist}, {"k1": args.k1, "k2": args.k2, "lambda": args.lam}, kind="distances")
    (dest / "config.json").write_text(
        json.dumps({"query": str(args.query), "gallery": str(args.gallery), "k1": args.k1, "k2": args.k2, "lambda": args.lam, "features": qmeta}, indent=2)
    )
    write_csv(dest / "eval.csv", rows, ["rerank"] + METRIC_FIELDS)
    for r in rows:
        print(f"{r['rerank']:>24}  mAP {r['mAP']:.4f}  R1 {r['rank1']:.4f}")
    return dest


def cmd_synth(args) -> Path:
    cfg = resolve_config(args)
    if cfg.dataset.synthetic is None:
        raise ConfigValidationError(["dataset.synthetic: synth needs a synthetic dataset config"])
    dest = out_dir(args, Path(cfg.output_dir) / "synthetic")
    dataset = load_dataset(cfg)
    save_image_folder(dataset, dest)
    cfg.save(dest / "config.json")
    print(f"wrote {len(dataset)} images of {dataset.num_identities} identities to {dest}")
    return dest


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=Path, default=None, help="output directory")
    det = common.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="protoreid", description="Prototype-projection person re-ID")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="RunConfig JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config field (JSON value)")

    sp = sub.add_parser("train", parents=[common], help="train a model")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--dataset", help="dataset root overriding the checkpoint's dataset")
    sp.add_argument("--kind", action="append", choices=["f", "f_s", "f_tilde", "f_tilde_s"])
    sp.add_argument("--rerank", nargs=3, metavar=("K1", "K2", "LAMBDA"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", parents=[common], help="train/evaluate along one ablation axis")
    with_config(sp)
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", nargs="+", required=True)
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.add_argument("--subset-seeds", nargs="+", type=int, default=[0, 1, 2])
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("inspect", parents=[common], help="top-k matches and prototypes for one query")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--dataset")
    sp.add_argument("--query-index", type=int, default=0)
    sp.add_argument("--k", type=int, default=10)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("extract", parents=[common], help="export query/gallery features")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--dataset")
    sp.add_argument("--kind", choices=["f", "f_s", "f_tilde", "f_tilde_s"])
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("rerank", parents=[common], help="k-reciprocal re-ranking on exported features")
    sp.add_argument("query", type=Path)
    sp.add_argument("gallery", type=Path)
    sp.add_argument("--k1", type=int, default=20)
    sp.add_argument("--k2", type=int, default=6)
    sp.add_argument("--lam", type=float, default=0.3)
    sp.set_defaults(func=cmd_rerank)

    sp = sub.add_parser("synth", parents=[common], help="write a synthetic dataset to disk")
    with_config(sp)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigValidationError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (ConfigError, ContainerError, DataError, EvaluationError, TrainingError, IndexError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
