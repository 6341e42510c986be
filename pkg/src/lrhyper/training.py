"""Losses, subset sampling, the optimizer, the training loop, checkpoints.

The per-step objective averages two loss terms with shared parameters: the
loss on a randomly drawn modality subset m and the loss on the full set.
When the draw lands on the full set the term is computed once and reused.

Optimizer update, per parameter p with gradient grad:

    g = grad + wd * p        (wd skipped for biases and norm affine)
    v = mu * v + g
    p = p - lr * (g + mu * v)

which is the usual Nesterov-momentum form with L2 decay folded into the
gradient before the momentum update.
"""

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np

from lrhyper import autodiff as ad
from lrhyper.container import save_arrays, load_arrays
from lrhyper.datagen import SegmentationDataset
from lrhyper.factorized import CpKernel, cp_normalize
from lrhyper.layers import LrConv2d, LrLinear
from lrhyper.modality import subset_from_index, n_subsets
from lrhyper.networks import build_network
from lrhyper.rng import make_rng

__all__ = [
    "TrainConfig",
    "dice_loss",
    "ce_loss",
    "seg_loss",
    "sample_subset",
    "total_loss",
    "SgdNesterov",
    "normalize_network",
    "train",
    "spec_hash",
    "save_checkpoint",
    "load_checkpoint",
]

DICE_SMOOTH = 1e-5


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-4
    momentum: float = 0.99
    weight_decay: float = 1e-5
    seed: int = 0
    normalization: str = "per-epoch"  # per-step | per-epoch | init-only
    loss: str = "dice+ce"  # dice+ce | ce

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr < 0.0:
            raise ValueError("learning rate must be nonnegative")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be nonnegative")
        if self.normalization not in ("per-step", "per-epoch", "init-only"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.loss not in ("dice+ce", "ce"):
            raise ValueError(f"unknown loss kind {self.loss!r}")


def _check_target(logits, target):
    target = np.asarray(target)
    n_classes = logits.value.shape[1]
    if target.min() < 0 or target.max() >= n_classes:
        raise ValueError(
            f"target class ids must lie in [0, {n_classes}); got "
            f"[{target.min()}, {target.max()}]"
        )
    return target


def ce_loss(logits, target):
    """Mean negative log-likelihood; works for [B,C] and [B,C,H,W] logits."""
    target = _check_target(logits, target)
    logp = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.reduce_mean(ad.gather_channel(logp, target)))


def dice_loss(logits, target):
    """One minus mean soft Dice over classes and batch (spatial logits)."""
    target = _check_target(logits, target)
    n_classes = logits.value.shape[1]
    probs = ad.exp(ad.log_softmax(logits, axis=1))
    onehot = np.stack([(target == c).astype(float) for c in range(n_classes)],
                      axis=1)
    spatial = tuple(range(2, probs.value.ndim))
    inter = ad.reduce_sum(ad.mul(probs, ad.Node(onehot)), axis=spatial)
    denom = ad.add(ad.reduce_sum(probs, axis=spatial),
                   ad.Node(onehot.sum(axis=spatial)))
    dice = ad.div(inter * 2.0 + DICE_SMOOTH, denom + DICE_SMOOTH)
    return ad.Node(1.0) - ad.reduce_mean(dice)


def seg_loss(logits, target, kind="dice+ce"):
    if kind == "ce":
        return ce_loss(logits, target)
    return ad.add(dice_loss(logits, target), ce_loss(logits, target))


def sample_subset(rng, m_count):
    """Uniform draw from {1, .., m_count}."""
    if m_count < 1:
        raise ValueError("m_count must be at least 1")
    return int(rng.integers(1, m_count + 1))


def _restrict(inputs, mask):
    return {i: inputs[i] for i in mask.indices}


def total_loss(net, inputs, target, m, loss_kind="dice+ce"):
    """Half the subset-m loss plus half the full-modality loss.

    ``inputs`` holds all modalities; the subset restriction happens here.
    """
    n = net.spec.n_modalities
    m_count = n_subsets(n)
    full = subset_from_index(m_count, n)
    loss_full = seg_loss(net.forward(_restrict(inputs, full), full), target,
                         loss_kind)
    if m == m_count:
        return loss_full
    mask = subset_from_index(m, n)
    loss_m = seg_loss(net.forward(_restrict(inputs, mask), mask), target,
                      loss_kind)
    return ad.add(loss_m, loss_full) * 0.5


class SgdNesterov:
    """Stateful optimizer over a fixed path -> Node parameter mapping."""

    def __init__(self, params, config):
        self.params = params
        self.config = config
        self.velocity = {path: np.zeros_like(node.value)
                         for path, node in params.items()}

    @staticmethod
    def decays(path):
        """Weight decay hits factor and dense weights, not biases or norms."""
        leaf = path.rsplit("/", 1)[-1]
        return leaf not in ("bias", "gain")

    def step(self):
        cfg = self.config
        for path, node in self.params.items():
            if node.grad is None:
                continue
            if node.grad.shape != node.value.shape:
                raise ValueError(f"gradient shape mismatch at {path}")
            g = node.grad
            if cfg.weight_decay > 0.0 and self.decays(path):
                g = g + cfg.weight_decay * node.value
            v = self.velocity[path]
            v *= cfg.momentum
            v += g
            node.value -= cfg.lr * (g + cfg.momentum * v)


def normalize_network(net):
    """Absorb factor column norms into A for every CP-factorized layer."""
    for layer in getattr(net, "_layers", {}).values():
        if not isinstance(layer, (LrConv2d, LrLinear)):
            continue
        if layer.decomposition != "cp":
            continue
        p = layer.params()
        d = p["D"].value if "D" in p else None
        kern = CpKernel(layer.dims, layer.rank, p["A"].value, p["B"].value,
                        p["C"].value, d, p["bias"].value)
        normed = cp_normalize(kern)
        p["A"].value[:] = normed.A
        p["B"].value[:] = normed.B
        p["C"].value[:] = normed.C
        if d is not None:
            p["D"].value[:] = normed.D


def train(net, dataset, config, val_hook=None):
    """Run the full loop; returns a per-epoch list of metric dicts.

    ``val_hook``, if given, is called as val_hook(net, epoch) after each
    epoch and its result stored under "val" in that epoch's record.
    """
    if dataset.spec.n_modalities != net.spec.n_modalities:
        raise ValueError("network and dataset disagree on modality count")
    loss_kind = config.loss
    if not isinstance(dataset, SegmentationDataset) and loss_kind != "ce":
        loss_kind = "ce"
    rng = make_rng(config.seed)
    params = net.params()
    opt = SgdNesterov(params, config)
    m_count = n_subsets(net.spec.n_modalities)
    if config.normalization == "init-only":
        normalize_network(net)
    log = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            inputs, target = dataset.batch(idx)
            m = sample_subset(rng, m_count)
            loss = total_loss(net, inputs, target, m, loss_kind)
            if not np.isfinite(loss.value):
                raise FloatingPointError(
                    f"non-finite loss {loss.value} at epoch {epoch} step {step}"
                )
            for node in params.values():
                node.grad = None
            ad.backward(loss)
            opt.step()
            if config.normalization == "per-step":
                normalize_network(net)
            losses.append(float(loss.value))
            step += 1
        if config.normalization == "per-epoch":
            normalize_network(net)
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val_hook is not None:
            record["val"] = val_hook(net, epoch)
        log.append(record)
    return log


def param_group(path):
    """Coarse bucket for reporting: factor tensors, biases, stems, heads, norms."""
    parts = path.split("/")
    leaf = parts[-1]
    if parts[0].startswith("stem"):
        return "stem"
    if parts[0].startswith(("head", "proj")):
        return "head" if parts[0].startswith("head") else "stem"
    if any("norm" in p for p in parts[:-1]):
        return "norm"
    if leaf in ("A", "B", "C", "D", "G"):
        return leaf
    if leaf == "bias":
        return "bias"
    return "weight"


def gradient_check_groups(net, inputs, target, m=1, samples=50, h=1e-4,
                          seed=0, loss_kind="dice+ce"):
    """Finite-difference check per parameter group; returns group -> max err."""
    groups = {}
    for path, node in net.params().items():
        groups.setdefault(param_group(path), []).append(node)
    rng = make_rng(seed)
    out = {}
    for name, nodes in sorted(groups.items()):
        out[name] = ad.check_gradients(
            lambda: total_loss(net, inputs, target, m, loss_kind),
            nodes, h=h, samples_per_param=samples, rng=rng,
        )
    return out


def spec_hash(spec):
    blob = json.dumps(asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(net, path, epoch=0, metrics=None, dedicated=False):
    meta = {
        "artifact": "checkpoint",
        "spec": asdict(net.spec),
        "spec_hash": spec_hash(net.spec),
        "epoch": epoch,
        "metrics": metrics or {},
        "dedicated": dedicated,
    }
    save_arrays(path, meta, net.param_values())


def load_checkpoint(path, expected_spec=None):
    """Rebuild the network from a checkpoint; returns (net, metadata)."""
    meta, arrays = load_arrays(path)
    if meta.get("artifact") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint container")
    if expected_spec is not None and spec_hash(expected_spec) != meta["spec_hash"]:
        raise ValueError(
            f"{path}: checkpoint was written for a different network spec"
        )
    from lrhyper.networks import NetworkSpec

    spec = NetworkSpec(**meta["spec"])
    net = build_network(spec, 0, dedicated=meta.get("dedicated", False))
    params = net.params()
    if set(params) != set(arrays):
        raise ValueError(
            f"{path}: parameter paths do not match the network config"
        )
    for p, node in params.items():
        if node.value.shape != arrays[p].shape:
            raise ValueError(f"{path}: shape mismatch at {p}")
        node.value[:] = arrays[p]
    return net, meta
