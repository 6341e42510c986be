"""Architecture builders and parameter accounting.

Two families are supported: a U-Net style segmentation hypernetwork and a
feature-fusion classifier.  Both thread a single model index m (one per
modality subset) through every factorized layer, while stems, heads, and
projection/classifier banks stay uncompressed in M copies.

The encoder reading of the segmentation backbone: each stage applies one
k^d convolution (changing width) followed by a channel-preserving strided
2^d convolution for downsampling; the bridge applies two convolutions; the
decoder mirrors with channel-preserving 2^d transposed convolutions, skip
concatenation, and one convolution back down to the stage width.  Every
inner convolution is followed by instance normalization and leaky ReLU.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import yaml

from lrhyper import autodiff as ad
from lrhyper.factorized import LayerDims, cp_rank_for_budget, tucker_rank_for_budget
from lrhyper.layers import (
    LrConv2d,
    LrLinear,
    DenseConv2d,
    DenseLinear,
    InstanceNorm,
    LayerNorm,
    StemBank,
    HeadBank,
    LEAKY_SLOPE,
)
from lrhyper.modality import ModalityMask, n_subsets, subset_index
from lrhyper.rng import make_rng

__all__ = [
    "NetworkSpec",
    "load_spec",
    "save_spec",
    "build_network",
    "UNetHyper",
    "FusionHyper",
    "DedicatedFamily",
    "count_parameters",
]


@dataclass
class NetworkSpec:
    """Declarative description of one network family."""

    task: str  # "segmentation" | "classification"
    n_modalities: int
    n_classes: int
    decomposition: str = "cp"  # "cp" | "tucker"
    rank_mult: float = 1.0
    explicit_rank: int = 0  # overrides the budget formula when > 0
    norm_per_model: bool = True
    # segmentation only
    channels: list = field(default_factory=list)
    in_channels_per_modality: int = 1
    kernel: int = 3
    spatial_rank: int = 2
    # classification only
    feature_widths: list = field(default_factory=list)
    bottleneck: int = 64
    fusion_hidden: int = 128
    n_fusion_blocks: int = 3

    def __post_init__(self):
        if self.task not in ("segmentation", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.decomposition not in ("cp", "tucker"):
            raise ValueError(f"unknown decomposition {self.decomposition!r}")
        if self.n_modalities < 1:
            raise ValueError("need at least one modality")
        if self.task == "segmentation":
            if len(self.channels) < 2:
                raise ValueError("segmentation spec needs at least two stage widths")
            if self.spatial_rank not in (2, 3):
                raise ValueError("spatial_rank must be 2 or 3")
        else:
            if len(self.feature_widths) != self.n_modalities:
                raise ValueError(
                    "classification spec needs one feature width per modality"
                )

    @property
    def m_count(self):
        return n_subsets(self.n_modalities)

    def layer_rank(self, dims):
        """Rank for one factorized layer under this spec's rank policy."""
        if self.explicit_rank > 0:
            return self.explicit_rank
        if self.decomposition == "cp":
            base = cp_rank_for_budget(dims)
        else:
            base = tucker_rank_for_budget(dims)
        return max(1, int(math.floor(base * self.rank_mult)))


def load_spec(path):
    with open(path) as f:
        data = yaml.safe_load(f)
    return NetworkSpec(**data)


def save_spec(spec, path):
    with open(path, "w") as f:
        yaml.safe_dump(asdict(spec), f, sort_keys=False)


def _act(x, slope=LEAKY_SLOPE):
    return ad.leaky_relu(x, slope)


class _Network:
    """Common plumbing: a registry of named layers and their parameters."""

    def __init__(self):
        self._layers = {}

    def _register(self, path, layer):
        self._layers[path] = layer
        return layer

    def params(self):
        out = {}
        for path, layer in sorted(self._layers.items()):
            for name, node in layer.params().items():
                out[f"{path}/{name}"] = node
        return out

    def param_values(self):
        return {path: node.value for path, node in self.params().items()}


class UNetHyper(_Network):
    """Segmentation hypernetwork: one parameter set, M reconstructable models."""

    def __init__(self, spec, rng):
        super().__init__()
        if spec.task != "segmentation":
            raise ValueError("spec is not a segmentation spec")
        self.spec = spec
        m_count = spec.m_count
        d = spec.spatial_rank
        ch = list(spec.channels)
        k_full = spec.kernel ** d
        k_down = 2 ** d
        kfull_sp = (spec.kernel,) * d
        kdown_sp = (2,) * d
        pad = spec.kernel // 2
        cpm = spec.in_channels_per_modality

        def lrconv(path, c_in, c_out, spatial, k_flat, stride, p, transposed=False):
            dims = LayerDims(m_count, c_in, c_out, k_flat)
            layer = LrConv2d(
                dims, spatial, rng, stride=stride, pad=p, transposed=transposed,
                decomposition=spec.decomposition, rank=spec.layer_rank(dims),
            )
            return self._register(path, layer)

        def norm(path, channels):
            return self._register(
                path, InstanceNorm(channels, m_count, per_model=spec.norm_per_model)
            )

        self.stem = self._register(
            "stem",
            StemBank(spec.n_modalities, [cpm] * spec.n_modalities, ch[0],
                     kfull_sp, rng, pad=pad),
        )
        self.stem_norm = norm("stem_norm", ch[0])

        n_stages = len(ch) - 1
        self.enc = []
        prev = ch[0]
        for i in range(n_stages):
            conv = lrconv(f"enc{i}/conv", prev, ch[i], kfull_sp, k_full, 1, pad)
            cn = norm(f"enc{i}/conv_norm", ch[i])
            down = lrconv(f"enc{i}/down", ch[i], ch[i], kdown_sp, k_down, 2, 0)
            dn = norm(f"enc{i}/down_norm", ch[i])
            self.enc.append((conv, cn, down, dn))
            prev = ch[i]
        self.bridge = [
            (lrconv("bridge0/conv", prev, ch[-1], kfull_sp, k_full, 1, pad),
             norm("bridge0/norm", ch[-1])),
            (lrconv("bridge1/conv", ch[-1], ch[-1], kfull_sp, k_full, 1, pad),
             norm("bridge1/norm", ch[-1])),
        ]
        self.dec = []
        cur = ch[-1]
        for i in reversed(range(n_stages)):
            up = lrconv(f"dec{i}/up", cur, cur, kdown_sp, k_down, 2, 0,
                        transposed=True)
            un = norm(f"dec{i}/up_norm", cur)
            conv = lrconv(f"dec{i}/conv", cur + ch[i], ch[i], kfull_sp, k_full, 1, pad)
            cn = norm(f"dec{i}/conv_norm", ch[i])
            self.dec.append((i, up, un, conv, cn))
            cur = ch[i]
        self.head = self._register(
            "head",
            HeadBank(spec.n_modalities, ch[0], spec.n_classes, (1,) * d, rng),
        )

    def forward(self, inputs, mask):
        """Logits for a batch restricted to ``mask``.

        ``inputs`` maps modality id -> Node or array of shape [B, C, H, W].
        """
        if self.spec.spatial_rank != 2:
            raise NotImplementedError("forward is implemented for 2-D specs only")
        inputs = {i: ad.as_node(v) for i, v in inputs.items()}
        m = subset_index(mask)
        x = _act(self.stem_norm.forward(self.stem.forward(inputs, mask), m))
        skips = {}
        for i, (conv, cn, down, dn) in enumerate(self.enc):
            x = _act(cn.forward(conv.forward(x, m), m))
            skips[i] = x
            x = _act(dn.forward(down.forward(x, m), m))
        for conv, cn in self.bridge:
            x = _act(cn.forward(conv.forward(x, m), m))
        for i, up, un, conv, cn in self.dec:
            x = _act(un.forward(up.forward(x, m), m))
            x = ad.concat([x, skips[i]], axis=1)
            x = _act(cn.forward(conv.forward(x, m), m))
        return self.head.forward(x, m)


class FusionHyper(_Network):
    """Classification hypernetwork over pre-extracted modality features."""

    def __init__(self, spec, rng):
        super().__init__()
        if spec.task != "classification":
            raise ValueError("spec is not a classification spec")
        self.spec = spec
        m_count = spec.m_count
        bn = spec.bottleneck

        # per-subset projection (the uncompressed analogue of the stems)
        self.proj = {}
        self.proj_norm = {}
        for m in range(1, m_count + 1):
            width = sum(spec.feature_widths[i] for i in range(spec.n_modalities)
                        if m & (1 << i))
            self.proj[m] = self._register(f"proj/m{m}", DenseLinear(width, bn, rng))
            self.proj_norm[m] = self._register(
                f"proj/m{m}_norm", LayerNorm(bn, 1, per_model=False)
            )

        def lrlinear(path, c_in, c_out):
            layer = LrLinear(
                m_count, c_in, c_out, rng, decomposition=spec.decomposition,
                rank=spec.layer_rank(LayerDims(m_count, c_in, c_out, 1)),
            )
            return self._register(path, layer)

        self.blocks = []
        for b in range(spec.n_fusion_blocks):
            lin1 = lrlinear(f"fusion{b}/lin1", bn, spec.fusion_hidden)
            ln1 = self._register(
                f"fusion{b}/norm1",
                LayerNorm(spec.fusion_hidden, m_count, per_model=spec.norm_per_model),
            )
            lin2 = lrlinear(f"fusion{b}/lin2", spec.fusion_hidden, bn)
            self.blocks.append((lin1, ln1, lin2))
        self.final_norm = self._register(
            "final_norm", LayerNorm(bn, m_count, per_model=spec.norm_per_model)
        )

        # per-subset two-layer classifier heads
        self.heads = {}
        for m in range(1, m_count + 1):
            h1 = self._register(f"head/m{m}/lin1", DenseLinear(bn, bn, rng))
            h2 = self._register(f"head/m{m}/lin2", DenseLinear(bn, spec.n_classes, rng))
            self.heads[m] = (h1, h2)

    def forward(self, features, mask):
        """Class logits for a batch of per-modality feature vectors."""
        features = {i: ad.as_node(v) for i, v in features.items()}
        if set(features) != set(mask.present):
            raise ValueError(
                f"features for modalities {sorted(features)} do not match mask "
                f"{sorted(mask.present)}"
            )
        m = subset_index(mask)
        parts = [features[i] for i in mask.indices]
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        x = _act(self.proj_norm[m].forward(self.proj[m].forward(x)), 0.0)
        for lin1, ln1, lin2 in self.blocks:
            h = _act(ln1.forward(lin1.forward(x, m), m), 0.0)
            x = ad.add(x, lin2.forward(h, m))
        x = self.final_norm.forward(x, m)
        h1, h2 = self.heads[m]
        return h2.forward(_act(h1.forward(x), 0.0))


class DedicatedUNet(_Network):
    """One uncompressed segmentation network for a single modality subset."""

    def __init__(self, spec, mask, rng):
        super().__init__()
        self.spec = spec
        self.mask = mask
        d = spec.spatial_rank
        ch = list(spec.channels)
        kfull_sp = (spec.kernel,) * d
        kdown_sp = (2,) * d
        pad = spec.kernel // 2
        in_ch = spec.in_channels_per_modality * len(mask)

        def conv(path, c_in, c_out, spatial, stride=1, p=0, transposed=False):
            return self._register(
                path,
                DenseConv2d(c_in, c_out, spatial, rng, stride=stride, pad=p,
                            transposed=transposed),
            )

        def norm(path, channels):
            return self._register(path, InstanceNorm(channels, 1, per_model=False))

        self.stem = conv("stem", in_ch, ch[0], kfull_sp, p=pad)
        self.stem_norm = norm("stem_norm", ch[0])
        n_stages = len(ch) - 1
        self.enc = []
        prev = ch[0]
        for i in range(n_stages):
            self.enc.append((
                conv(f"enc{i}/conv", prev, ch[i], kfull_sp, p=pad),
                norm(f"enc{i}/conv_norm", ch[i]),
                conv(f"enc{i}/down", ch[i], ch[i], kdown_sp, stride=2),
                norm(f"enc{i}/down_norm", ch[i]),
            ))
            prev = ch[i]
        self.bridge = [
            (conv("bridge0/conv", prev, ch[-1], kfull_sp, p=pad),
             norm("bridge0/norm", ch[-1])),
            (conv("bridge1/conv", ch[-1], ch[-1], kfull_sp, p=pad),
             norm("bridge1/norm", ch[-1])),
        ]
        self.dec = []
        cur = ch[-1]
        for i in reversed(range(n_stages)):
            self.dec.append((
                i,
                conv(f"dec{i}/up", cur, cur, kdown_sp, stride=2, transposed=True),
                norm(f"dec{i}/up_norm", cur),
                conv(f"dec{i}/conv", cur + ch[i], ch[i], kfull_sp, p=pad),
                norm(f"dec{i}/conv_norm", ch[i]),
            ))
            cur = ch[i]
        self.head = conv("head", ch[0], spec.n_classes, (1,) * d)

    def forward(self, inputs, mask):
        if mask != self.mask:
            raise ValueError("dedicated model asked to serve a different subset")
        inputs = {i: ad.as_node(v) for i, v in inputs.items()}
        parts = [inputs[i] for i in mask.indices]
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        x = _act(self.stem_norm.forward(self.stem.forward(x)))
        skips = {}
        for i, (conv, cn, down, dn) in enumerate(self.enc):
            x = _act(cn.forward(conv.forward(x)))
            skips[i] = x
            x = _act(dn.forward(down.forward(x)))
        for conv, cn in self.bridge:
            x = _act(cn.forward(conv.forward(x)))
        for i, up, un, conv, cn in self.dec:
            x = _act(un.forward(up.forward(x)))
            x = ad.concat([x, skips[i]], axis=1)
            x = _act(cn.forward(conv.forward(x)))
        return self.head.forward(x)


class DedicatedFamily:
    """M independent dense networks, one per modality subset."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.members = {}
        for m in range(1, spec.m_count + 1):
            mask = ModalityMask(
                spec.n_modalities,
                frozenset(i for i in range(spec.n_modalities) if m & (1 << i)),
            )
            self.members[m] = DedicatedUNet(spec, mask, rng)

    def forward(self, inputs, mask):
        return self.members[subset_index(mask)].forward(inputs, mask)

    def params(self):
        out = {}
        for m, member in self.members.items():
            for path, node in member.params().items():
                out[f"family/m{m}/{path}"] = node
        return out

    def param_values(self):
        return {path: node.value for path, node in self.params().items()}


def build_network(spec, rng_or_seed, dedicated=False):
    rng = rng_or_seed if not isinstance(rng_or_seed, int) else make_rng(rng_or_seed)
    if dedicated:
        if spec.task != "segmentation":
            raise ValueError("dedicated family is only defined for segmentation")
        return DedicatedFamily(spec, rng)
    if spec.task == "segmentation":
        return UNetHyper(spec, rng)
    return FusionHyper(spec, rng)


def count_parameters(net):
    """Per-path and grouped parameter counts.

    Returns a dict with 'total', 'per_path', and 'groups'; groups split
    the total into stems, heads, and inner layers.
    """
    per_path = {path: int(node.value.size) for path, node in net.params().items()}
    groups = {"stem": 0, "head": 0, "inner": 0}
    for path, size in per_path.items():
        base = path.split("/", 2)
        key = base[1] if base[0].startswith("family") else base[0]
        if key.startswith("stem") or key.startswith("proj"):
            groups["stem"] += size
        elif key.startswith("head"):
            groups["head"] += size
        else:
            groups["inner"] += size
    total = sum(per_path.values())
    return {"total": total, "per_path": per_path, "groups": groups}
