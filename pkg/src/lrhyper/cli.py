"""Command-line interface.

Subcommands: train, eval, params, gradcheck, gen-data, ablate-rank,
ablate-decomp.  Config files are YAML; a network config may carry an
optional ``train:`` section with training hyperparameters.  Reports are
written to the --out directory (default: $LRHYPER_OUT or ./lrhyper-out)
as JSON next to a printed human-readable table.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from lrhyper.datagen import (
    DatasetSpec,
    gen_segmentation,
    gen_classification,
    load_dataset,
    save_dataset,
    train_val_split,
)
from lrhyper.evaluate import (
    evaluate_all_subsets,
    complexity_report,
    format_complexity_report,
    ablation_rank_sweep,
    ablate_decomposition,
)
from lrhyper.networks import NetworkSpec, build_network
from lrhyper.training import (
    TrainConfig,
    train,
    save_checkpoint,
    load_checkpoint,
    gradient_check_groups,
)

OUT_ENV = "LRHYPER_OUT"
GRADCHECK_TOL = 1e-4


def default_out():
    return os.environ.get(OUT_ENV, "lrhyper-out")


def load_run_config(path):
    """Network spec plus optional training section from one YAML file."""
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    train_part = data.pop("train", {}) or {}
    return NetworkSpec(**data), TrainConfig(**train_part)


def _apply_overrides(spec, args):
    if getattr(args, "decomp", None):
        spec = type(spec)(**{**asdict(spec), "decomposition": args.decomp})
    if getattr(args, "rank_mult", None) is not None:
        spec = type(spec)(**{**asdict(spec), "rank_mult": args.rank_mult})
    return spec


def _apply_train_overrides(cfg, args):
    over = {}
    for name in ("epochs", "batch_size", "lr"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if args.seed is not None:
        over["seed"] = args.seed
    if over:
        cfg = TrainConfig(**{**asdict(cfg), **over})
    return cfg


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_gen_data(args):
    with open(args.spec) as f:
        spec = DatasetSpec(**yaml.safe_load(f))
    ds = gen_segmentation(spec) if spec.kind == "segmentation" \
        else gen_classification(spec)
    out = _outdir(args)
    path = out / "data.bin"
    save_dataset(ds, path)
    print(f"wrote {len(ds)} samples to {path}")
    return 0


def cmd_params(args):
    spec, _ = load_run_config(args.spec)
    spec = _apply_overrides(spec, args)
    report = complexity_report(spec)
    print(format_complexity_report(report))
    out = _outdir(args)
    _write_json(out / "params.json", report)
    return 0


def cmd_gradcheck(args):
    spec, _ = load_run_config(args.spec)
    spec = _apply_overrides(spec, args)
    seed = args.seed if args.seed is not None else 0
    net = build_network(spec, seed)
    data_spec = DatasetSpec(kind="segmentation",
                            n_modalities=spec.n_modalities, size=2,
                            image_size=8, n_classes=spec.n_classes,
                            seed=seed + 1)
    ds = gen_segmentation(data_spec)
    inputs, target = ds.batch([0])
    errs = gradient_check_groups(net, inputs, target, m=1, samples=50,
                                 h=1e-5, seed=seed + 2)
    worst = max(errs.values())
    for group, err in sorted(errs.items()):
        print(f"{group:<8} max rel err {err:.3e}")
    print(f"overall max rel err {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    out = _outdir(args)
    _write_json(out / "gradcheck.json",
                {"groups": errs, "max": worst, "tolerance": GRADCHECK_TOL})
    return 0 if worst <= GRADCHECK_TOL else 1


def _eval_and_write(net, dataset, out, subsets=None, stem="eval"):
    report = evaluate_all_subsets(net, dataset, subsets=subsets)
    print(report.to_table())
    _write_json(out / f"{stem}.json", report.to_dict())
    (out / f"{stem}.txt").write_text(report.to_table() + "\n")
    return report


def cmd_train(args):
    spec, cfg = load_run_config(args.spec)
    spec = _apply_overrides(spec, args)
    cfg = _apply_train_overrides(cfg, args)
    dataset = load_dataset(args.data)
    train_set, val_set = train_val_split(dataset)
    seed = args.seed if args.seed is not None else cfg.seed
    net = build_network(spec, seed)
    log = train(net, train_set, cfg)
    out = _outdir(args)
    with open(out / "metrics.jsonl", "w") as f:
        for record in log:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    report = _eval_and_write(net, val_set, out)
    save_checkpoint(net, out / "checkpoint.bin", epoch=cfg.epochs,
                    metrics={"final_loss": log[-1]["loss"],
                             "val_average": report.average["mean"]})
    print(f"final loss {log[-1]['loss']:.4f}; "
          f"val average {report.average['mean']:.2f}; "
          f"checkpoint at {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args):
    spec, _ = load_run_config(args.spec)
    spec = _apply_overrides(spec, args)
    net, _meta = load_checkpoint(args.checkpoint, expected_spec=spec)
    dataset = load_dataset(args.data)
    _, val_set = train_val_split(dataset)
    subsets = [args.subset] if args.subset is not None else None
    _eval_and_write(net, val_set, _outdir(args), subsets=subsets)
    return 0


def cmd_ablate_rank(args):
    spec, cfg = load_run_config(args.spec)
    spec = _apply_overrides(spec, args)
    cfg = _apply_train_overrides(cfg, args)
    dataset = load_dataset(args.data)
    train_set, val_set = train_val_split(dataset)
    seed = args.seed if args.seed is not None else cfg.seed
    results = ablation_rank_sweep(spec, train_set, val_set, cfg, seed=seed)
    print(f"{'variant':<10} {'params':>10} {'avg':>8}")
    for r in results:
        print(f"{r['variant']:<10} {r['params']:>10,} {r['average']:>8.2f}")
    _write_json(_outdir(args) / "ablate_rank.json", results)
    return 0


def cmd_ablate_decomp(args):
    spec, cfg = load_run_config(args.spec)
    cfg = _apply_train_overrides(cfg, args)
    dataset = load_dataset(args.data)
    train_set, val_set = train_val_split(dataset)
    seed = args.seed if args.seed is not None else cfg.seed
    results = ablate_decomposition(spec, train_set, val_set, cfg, seed=seed)
    print(f"{'variant':<10} {'params':>10} {'avg':>8}")
    for r in results:
        print(f"{r['variant']:<10} {r['params']:>10,} {r['average']:>8.2f}")
    _write_json(_outdir(args) / "ablate_decomp.json", results)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lrhyper",
        description="Low-rank hypernetworks for missing-modality models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False):
        p.add_argument("--spec", required=True, help="YAML config path")
        p.add_argument("--out", default=default_out(),
                       help=f"output directory (default ${OUT_ENV} or "
                            "./lrhyper-out)")
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", required=True,
                           help="dataset container path")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    def model_flags(p):
        p.add_argument("--decomp", choices=["cp", "tucker"], default=None)
        p.add_argument("--rank-mult", type=float, default=None,
                       dest="rank_mult",
                       help="multiplier on the budget rank "
                            "(0.25, 0.5, 1, 2, 7)")

    def train_flags(p):
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None,
                       dest="batch_size")
        p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("train", help="train a hypernetwork")
    common(p, data=True)
    model_flags(p)
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint per subset")
    common(p, data=True, checkpoint=True)
    model_flags(p)
    p.add_argument("--subset", type=int, default=None,
                   help="evaluate a single subset bitmask")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter accounting report")
    common(p)
    model_flags(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    model_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ablate-rank", help="rank-multiplier sweep")
    common(p, data=True)
    train_flags(p)
    p.set_defaults(func=cmd_ablate_rank)

    p = sub.add_parser("ablate-decomp", help="CP vs Tucker comparison")
    common(p, data=True)
    train_flags(p)
    p.set_defaults(func=cmd_ablate_decomp)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, TypeError,
            NotImplementedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
