"""Network layers over the autodiff graph.

Factorized layers store CP or Tucker factors as leaf nodes and rebuild the
selected model's dense weights inside the graph on every forward call, so
gradients reach the factors.  Reconstruction happens once per call and is
shared by the whole batch.

Weight layouts: convolution weights are (C_out, C_in, kh, kw); transposed
convolution weights are (C_in, C_out, kh, kw).  Factorized kernels store
the flattened-kernel mode last, as (C_in, C_out, K).
"""

import numpy as np

from lrhyper import autodiff as ad
from lrhyper.factorized import (
    LayerDims,
    cp_init,
    tucker_init,
    cp_rank_for_budget,
    tucker_rank_for_budget,
)
from lrhyper.modality import subset_index
from lrhyper.rng import kaiming_normal

__all__ = [
    "LrConv2d",
    "LrLinear",
    "DenseConv2d",
    "DenseLinear",
    "InstanceNorm",
    "LayerNorm",
    "StemBank",
    "HeadBank",
    "LEAKY_SLOPE",
]

LEAKY_SLOPE = 0.01  # negative slope for all leaky ReLUs in the backbone


class _ParamHolder:
    """Mixin: expose the trainable leaf nodes as a name -> Node mapping."""

    def params(self):
        return dict(self._params)


def _as_params(arrays):
    return {name: ad.Node(value) for name, value in arrays.items()}


class LrConv2d(_ParamHolder):
    """Factorized (transposed) convolution shared across all M models."""

    def __init__(self, dims, spatial, rng, stride=1, pad=0, transposed=False,
                 decomposition="cp", rank=None):
        if int(np.prod(spatial)) != dims.k_flat:
            raise ValueError(
                f"spatial extents {spatial} do not flatten to k_flat={dims.k_flat}"
            )
        self.dims = dims
        self.spatial = tuple(spatial)
        self.stride = stride
        self.pad = pad
        self.transposed = transposed
        self.decomposition = decomposition
        if decomposition == "cp":
            self.rank = rank if rank is not None else cp_rank_for_budget(dims)
            k = cp_init(dims, self.rank, rng)
            arrays = {"A": k.A, "B": k.B, "C": k.C, "D": k.D, "bias": k.bias}
        elif decomposition == "tucker":
            self.rank = rank if rank is not None else tucker_rank_for_budget(dims)
            k = tucker_init(dims, self.rank, rng)
            arrays = {"A": k.A, "G": k.G, "B": k.B, "C": k.C, "D": k.D,
                      "bias": k.bias}
        else:
            raise ValueError(f"unknown decomposition {decomposition!r}")
        self._params = _as_params(arrays)

    def reconstruct(self, m):
        """Graph node holding model m's weights, shape (C_in, C_out, K)."""
        p = self._params
        a = ad.take_row(p["A"], m - 1)
        if self.decomposition == "cp":
            ba = ad.mul(p["B"], a)  # broadcast over rows
            t = ad.einsum2("ir,or->iro", ba, p["C"])
            return ad.einsum2("iro,kr->iok", t, p["D"])
        core = ad.einsum2("m,mrsk->rsk", a, p["G"])
        t = ad.einsum2("rsk,ir->isk", core, p["B"])
        t = ad.einsum2("isk,os->iok", t, p["C"])
        return ad.einsum2("iok,lk->iol", t, p["D"])

    def forward(self, x, m):
        if len(self.spatial) != 2:
            raise NotImplementedError("forward is implemented for 2-D kernels only")
        if x.value.shape[1] != self.dims.c_in:
            raise ValueError(
                f"input has {x.value.shape[1]} channels, layer expects {self.dims.c_in}"
            )
        kh, kw = self.spatial
        w = self.reconstruct(m)
        if self.transposed:
            # (C_in, C_out, kh, kw)
            w = ad.reshape(w, (self.dims.c_in, self.dims.c_out, kh, kw))
            y = ad.conv_transpose2d(x, w, stride=self.stride, pad=self.pad)
        else:
            # (C_out, C_in, kh, kw)
            w = ad.transpose(ad.reshape(w, (self.dims.c_in, self.dims.c_out, kh, kw)),
                             (1, 0, 2, 3))
            y = ad.conv2d(x, w, stride=self.stride, pad=self.pad)
        b = ad.reshape(ad.take_row(self._params["bias"], m - 1),
                       (1, self.dims.c_out, 1, 1))
        return ad.add(y, b)


class LrLinear(_ParamHolder):
    """Factorized linear layer; the kernel mode is dropped entirely."""

    def __init__(self, m_count, c_in, c_out, rng, decomposition="cp", rank=None):
        self.dims = LayerDims(m_count, c_in, c_out, 1)
        self.decomposition = decomposition
        if decomposition == "cp":
            self.rank = rank if rank is not None else cp_rank_for_budget(self.dims)
            k = cp_init(self.dims, self.rank, rng)
            arrays = {"A": k.A, "B": k.B, "C": k.C, "bias": k.bias}
        elif decomposition == "tucker":
            self.rank = rank if rank is not None else tucker_rank_for_budget(self.dims)
            k = tucker_init(self.dims, self.rank, rng)
            arrays = {"A": k.A, "G": k.G, "B": k.B, "C": k.C, "bias": k.bias}
        else:
            raise ValueError(f"unknown decomposition {decomposition!r}")
        self._params = _as_params(arrays)

    def forward(self, x, m):
        p = self._params
        a = ad.take_row(p["A"], m - 1)
        if self.decomposition == "cp":
            ba = ad.mul(p["B"], a)
            w = ad.einsum2("ir,or->io", ba, p["C"])
        else:
            core = ad.einsum2("m,mrsk->rsk", a, p["G"])
            t = ad.einsum2("rsk,ir->isk", core, p["B"])
            w = ad.reshape(ad.einsum2("isk,os->iok", t, p["C"]),
                           (self.dims.c_in, self.dims.c_out))
        y = ad.einsum2("bi,io->bo", x, w)
        return ad.add(y, ad.take_row(p["bias"], m - 1))


class DenseConv2d(_ParamHolder):
    """Plain convolution, used by stems, heads, and dedicated baselines."""

    def __init__(self, c_in, c_out, spatial, rng, stride=1, pad=0, transposed=False):
        self.c_in = c_in
        self.c_out = c_out
        self.spatial = tuple(spatial)
        self.stride = stride
        self.pad = pad
        self.transposed = transposed
        k_flat = int(np.prod(spatial))
        shape = ((c_in, c_out) if transposed else (c_out, c_in)) + self.spatial
        self._params = _as_params({
            "weight": kaiming_normal(rng, shape, fan_in=c_in * k_flat),
            "bias": np.zeros(c_out),
        })

    def forward(self, x):
        if len(self.spatial) != 2:
            raise NotImplementedError("forward is implemented for 2-D kernels only")
        if x.value.shape[1] != self.c_in:
            raise ValueError(
                f"input has {x.value.shape[1]} channels, layer expects {self.c_in}"
            )
        p = self._params
        if self.transposed:
            y = ad.conv_transpose2d(x, p["weight"], stride=self.stride, pad=self.pad)
        else:
            y = ad.conv2d(x, p["weight"], stride=self.stride, pad=self.pad)
        return ad.add(y, ad.reshape(p["bias"], (1, self.c_out, 1, 1)))


class DenseLinear(_ParamHolder):
    def __init__(self, c_in, c_out, rng):
        self.c_in = c_in
        self.c_out = c_out
        self._params = _as_params({
            "weight": kaiming_normal(rng, (c_in, c_out), fan_in=c_in),
            "bias": np.zeros(c_out),
        })

    def forward(self, x):
        return ad.add(ad.einsum2("bi,io->bo", x, self._params["weight"]),
                      self._params["bias"])


class InstanceNorm(_ParamHolder):
    """Instance norm with affine parameters, optionally one copy per model."""

    def __init__(self, channels, m_count=1, per_model=True, eps=1e-5):
        self.channels = channels
        self.per_model = per_model and m_count > 1
        self.eps = eps
        rows = m_count if self.per_model else 1
        self._params = _as_params({
            "gain": np.ones((rows, channels)),
            "bias": np.zeros((rows, channels)),
        })

    def forward(self, x, m=1):
        row = m - 1 if self.per_model else 0
        return ad.instance_norm(
            x,
            ad.take_row(self._params["gain"], row),
            ad.take_row(self._params["bias"], row),
            eps=self.eps,
        )


class LayerNorm(_ParamHolder):
    def __init__(self, features, m_count=1, per_model=True, eps=1e-5):
        self.features = features
        self.per_model = per_model and m_count > 1
        self.eps = eps
        rows = m_count if self.per_model else 1
        self._params = _as_params({
            "gain": np.ones((rows, features)),
            "bias": np.zeros((rows, features)),
        })

    def forward(self, x, m=1):
        row = m - 1 if self.per_model else 0
        return ad.layer_norm(
            x,
            ad.take_row(self._params["gain"], row),
            ad.take_row(self._params["bias"], row),
            eps=self.eps,
        )


class StemBank:
    """M uncompressed entry layers; stem m consumes exactly subset m's channels."""

    def __init__(self, n_modalities, channels_per_modality, c_out, spatial, rng,
                 stride=1, pad=0):
        self.n_modalities = n_modalities
        self.channels_per_modality = channels_per_modality
        m_count = (1 << n_modalities) - 1
        self.stems = {}
        for m in range(1, m_count + 1):
            width = sum(channels_per_modality[i] for i in range(n_modalities)
                        if m & (1 << i))
            self.stems[m] = DenseConv2d(width, c_out, spatial, rng,
                                        stride=stride, pad=pad)

    def forward(self, inputs, mask):
        """Concatenate subset channels (ascending modality id) and apply stem m.

        ``inputs`` maps modality id -> Node; it must contain exactly the
        modalities in ``mask``.
        """
        if set(inputs) != set(mask.present):
            raise ValueError(
                f"inputs for modalities {sorted(inputs)} do not match mask "
                f"{sorted(mask.present)}"
            )
        m = subset_index(mask)
        parts = [inputs[i] for i in mask.indices]
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        return self.stems[m].forward(x)

    def params(self):
        out = {}
        for m, stem in self.stems.items():
            for name, node in stem.params().items():
                out[f"m{m}/{name}"] = node
        return out


class HeadBank:
    """M uncompressed output layers mapping features to logits."""

    def __init__(self, n_modalities, c_in, c_out, spatial, rng):
        m_count = (1 << n_modalities) - 1
        self.heads = {
            m: DenseConv2d(c_in, c_out, spatial, rng) for m in range(1, m_count + 1)
        }

    def forward(self, x, m):
        return self.heads[m].forward(x)

    def params(self):
        out = {}
        for m, head in self.heads.items():
            for name, node in head.params().items():
                out[f"m{m}/{name}"] = node
        return out
