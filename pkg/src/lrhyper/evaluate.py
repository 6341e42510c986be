"""Per-subset metrics, report assembly, complexity accounting, ablations.

Reports follow the filled/empty-circle convention: a row per modality
subset, one column per foreground class (or a single accuracy column), and
an average row that is the arithmetic mean of the subset rows.  Hausdorff
distances are computed per class from exact pairwise boundary-pixel
distances, which is affordable at the image sizes this package targets.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from lrhyper.datagen import SegmentationDataset, subset_chance_floor
from lrhyper.modality import n_subsets, subset_from_index
from lrhyper.networks import build_network, count_parameters, DedicatedUNet
from lrhyper.training import TrainConfig, train
from lrhyper.modality import ModalityMask
from lrhyper.rng import make_rng

__all__ = [
    "dice_score",
    "hausdorff95",
    "EvalReport",
    "evaluate_all_subsets",
    "complexity_report",
    "format_complexity_report",
    "ablation_rank_sweep",
    "ablate_decomposition",
]


def dice_score(pred, gt, class_id):
    """Overlap score in percent; 100 when the class is absent in both."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    total = p.sum() + g.sum()
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(p, g).sum() / total


def _boundary(mask):
    """Coordinates of mask pixels with a 4-neighbour outside the mask."""
    if not mask.any():
        return np.empty((0, 2))
    p = np.pad(mask, 1)  # image border counts as outside
    interior = (p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1]
                & p[1:-1, :-2] & p[1:-1, 2:])
    return np.argwhere(mask & ~interior)


def hausdorff95(pred, gt, class_id):
    """95th-percentile symmetric boundary distance for one class.

    Both masks empty gives 0; exactly one empty gives infinity.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    bp = _boundary(pred == class_id)
    bg = _boundary(gt == class_id)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        return float("inf")
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(axis=2))
    return float(max(np.percentile(d.min(axis=1), 95),
                     np.percentile(d.min(axis=0), 95)))


@dataclass
class EvalReport:
    n_modalities: int
    metric: str  # "dice" | "accuracy"
    columns: list  # class ids or ["accuracy"]
    rows: list  # per subset: {"m", "present", "values", "mean"}
    average: dict  # {"values", "mean"}
    throughput: float  # samples/s, machine-dependent, not asserted on
    extra: dict

    def to_dict(self):
        return {
            "n_modalities": self.n_modalities,
            "metric": self.metric,
            "columns": list(self.columns),
            "rows": self.rows,
            "average": self.average,
            "throughput_samples_per_s": self.throughput,
            "extra": self.extra,
        }

    def to_table(self):
        mods = range(self.n_modalities)
        head_cols = "".join(f"  mod{i}" for i in mods)
        val_cols = "".join(f"  {c!s:>7}" for c in self.columns)
        lines = [f"{head_cols}  |{val_cols}  {'mean':>7}"]
        for row in self.rows:
            marks = "".join(
                f"  {'*' if i in row['present'] else 'o':>4}" for i in mods
            )
            vals = "".join(f"  {v:7.2f}" for v in row["values"])
            lines.append(f"{marks}  |{vals}  {row['mean']:7.2f}")
        vals = "".join(f"  {v:7.2f}" for v in self.average["values"])
        avg_pad = " " * len("".join(f"  {'':>4}" for _ in mods))
        lines.append(f"{avg_pad}  |{vals}  {self.average['mean']:7.2f}  (average)")
        lines.append("(* = modality present, o = absent; "
                     "throughput is machine-dependent)")
        return "\n".join(lines)


def _forward_batched(net, dataset, mask, batch_size):
    outs = []
    for lo in range(0, len(dataset), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(dataset)))
        inputs, _ = dataset.batch(idx)
        restricted = {i: inputs[i] for i in mask.indices}
        outs.append(net.forward(restricted, mask).value)
    return np.concatenate(outs, axis=0)


def evaluate_all_subsets(net, dataset, batch_size=8, subsets=None):
    """Metric table over every non-empty modality subset.

    ``subsets`` restricts the rows to the given model indices; the average
    row then averages only those.
    """
    n = dataset.spec.n_modalities
    m_count = n_subsets(n)
    seg = isinstance(dataset, SegmentationDataset)
    columns = (list(range(1, dataset.spec.n_classes)) if seg
               else ["accuracy"])
    rows = []
    t0 = time.perf_counter()
    wanted = list(range(1, m_count + 1)) if subsets is None else list(subsets)
    if any(not 1 <= m <= m_count for m in wanted):
        raise ValueError(f"subset indices must lie in [1, {m_count}]")
    for m in wanted:
        mask = subset_from_index(m, n)
        logits = _forward_batched(net, dataset, mask, batch_size)
        pred = logits.argmax(axis=1)
        if seg:
            values = [
                float(np.mean([dice_score(pred[i], dataset.targets[i], c)
                               for i in range(len(dataset))]))
                for c in columns
            ]
        else:
            values = [100.0 * float((pred == dataset.targets).mean())]
        rows.append({
            "m": m,
            "present": sorted(mask.present),
            "values": values,
            "mean": float(np.mean(values)),
        })
    elapsed = time.perf_counter() - t0
    avg_values = [float(np.mean([r["values"][j] for r in rows]))
                  for j in range(len(columns))]
    average = {"values": avg_values,
               "mean": float(np.mean([r["mean"] for r in rows]))}
    extra = {}
    if seg:
        extra["chance_floor"] = subset_chance_floor(dataset)
    return EvalReport(
        n_modalities=n,
        metric="dice" if seg else "accuracy",
        columns=columns,
        rows=rows,
        average=average,
        throughput=len(wanted) * len(dataset) / max(elapsed, 1e-9),
        extra=extra,
    )


def complexity_report(spec):
    """Parameter accounting: hypernetwork vs one dedicated dense model."""
    hyper = build_network(spec, 0)
    counts = count_parameters(hyper)
    ranks = []
    for path, layer in sorted(hyper._layers.items()):
        dims = getattr(layer, "dims", None)
        if dims is None:
            continue
        ranks.append({
            "layer": path,
            "m_count": dims.m_count,
            "c_in": dims.c_in,
            "c_out": dims.c_out,
            "k_flat": dims.k_flat,
            "rank": layer.rank,
        })
    report = {
        "spec": {"decomposition": spec.decomposition,
                 "rank_mult": spec.rank_mult,
                 "n_modalities": spec.n_modalities},
        "hyper_total": counts["total"],
        "groups": counts["groups"],
        "stem_head_fraction_pct": 100.0
        * (counts["groups"]["stem"] + counts["groups"]["head"])
        / counts["total"],
        "ranks": ranks,
    }
    if spec.task == "segmentation":
        full = ModalityMask(
            spec.n_modalities, frozenset(range(spec.n_modalities))
        )
        dedicated = DedicatedUNet(spec, full, make_rng(0))
        ded_total = count_parameters(dedicated)["total"]
        report["dedicated_single_total"] = ded_total
        report["hyper_vs_dedicated_pct"] = (
            100.0 * (counts["total"] - ded_total) / ded_total
        )
    return report


def format_complexity_report(report):
    lines = [
        f"hypernetwork parameters: {report['hyper_total']:,}",
    ]
    if "dedicated_single_total" in report:
        lines.append(
            f"dedicated single model:  {report['dedicated_single_total']:,} "
            f"(hyper is {report['hyper_vs_dedicated_pct']:+.2f}%)"
        )
    g = report["groups"]
    lines.append(
        f"stems {g['stem']:,} + heads {g['head']:,} = "
        f"{report['stem_head_fraction_pct']:.3f}% of the total"
    )
    lines.append("per-layer ranks:")
    for r in report["ranks"]:
        lines.append(
            f"  {r['layer']:<16} ({r['m_count']}, {r['c_in']}, {r['c_out']}, "
            f"{r['k_flat']}) -> R={r['rank']}"
        )
    return "\n".join(lines)


def _train_and_score(net, train_set, val_set, config):
    log = train(net, train_set, config)
    report = evaluate_all_subsets(net, val_set)
    return {
        "final_loss": log[-1]["loss"],
        "average": report.average["mean"],
        "params": count_parameters(net)["total"],
        "report": report.to_dict(),
    }


def ablation_rank_sweep(spec, train_set, val_set, config,
                        multipliers=(0.25, 0.5, 1.0, 2.0, 7.0),
                        include_dedicated=True, seed=0):
    """Train one variant per rank multiplier plus the dedicated family."""
    results = []
    for mult in multipliers:
        net = build_network(replace(spec, rank_mult=float(mult)), seed)
        entry = _train_and_score(net, train_set, val_set, config)
        entry["variant"] = f"x{mult:g}"
        results.append(entry)
    if include_dedicated:
        fam = build_network(spec, seed, dedicated=True)
        entry = _train_and_score(fam, train_set, val_set, config)
        entry["variant"] = "dedicated"
        results.append(entry)
    return results


def ablate_decomposition(spec, train_set, val_set, config, seed=0):
    """CP vs Tucker under identical seeds and budgets."""
    results = []
    for decomp in ("cp", "tucker"):
        net = build_network(replace(spec, decomposition=decomp), seed)
        entry = _train_and_score(net, train_set, val_set, config)
        entry["variant"] = decomp
        results.append(entry)
    return results
