"""Factorized joint weight tensors for a family of M models.

One layer of the whole model family is a 4-mode tensor W with modes
(model, input channel, output channel, flattened kernel).  Instead of
storing it densely, we keep either CP factors A, B, C, D or a Tucker core
with per-mode factors, sized so the family costs no more than a single
dense layer.  The weights of model m are reconstructed by contracting row
m of the model factor against the remaining factors, never materializing
the full tensor.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from lrhyper.rng import kaiming_normal
from lrhyper.tensor import column_l2_normalize

__all__ = [
    "LayerDims",
    "CpKernel",
    "TuckerKernel",
    "cp_rank_for_budget",
    "tucker_rank_for_budget",
    "cp_init",
    "tucker_init",
    "cp_reconstruct_full",
    "cp_reconstruct_slice",
    "tucker_reconstruct_slice",
    "cp_normalize",
    "param_count",
    "dense_equivalent_count",
    "single_dense_count",
]


@dataclass(frozen=True)
class LayerDims:
    """Sizes of one joint layer: model count M, channels, flattened kernel."""

    m_count: int
    c_in: int
    c_out: int
    k_flat: int

    def __post_init__(self):
        for name in ("m_count", "c_in", "c_out", "k_flat"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        m = self.m_count
        if m & (m + 1):  # not of the form 2^n - 1
            raise ValueError(f"m_count must be 2^n - 1, got {m}")


@dataclass(frozen=True)
class CpKernel:
    """CP factors of the joint weight tensor plus per-model biases.

    A: (M, R) model factor, B: (C_in, R), C: (C_out, R), D: (K, R).
    For linear layers (k_flat == 1) the kernel factor D is dropped
    entirely and reconstruction treats the K mode as trivial.
    """

    dims: LayerDims
    rank: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray  # None when the kernel mode is dropped (linear layers)
    bias: np.ndarray

    def __post_init__(self):
        d = self.dims
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        expected = {
            "A": (d.m_count, self.rank),
            "B": (d.c_in, self.rank),
            "C": (d.c_out, self.rank),
            "bias": (d.m_count, d.c_out),
        }
        if self.D is not None:
            expected["D"] = (d.k_flat, self.rank)
        elif d.k_flat != 1:
            raise ValueError("factor D may only be dropped when k_flat == 1")
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")


@dataclass(frozen=True)
class TuckerKernel:
    """Tucker core and factors of the joint weight tensor.

    The model and kernel modes are not compressed: A is (M, M) and
    D is (K, K).  The core G has shape (M, R, R, K); its two R modes pair
    with B (input channels) and C (output channels) respectively.
    """

    dims: LayerDims
    rank: int
    A: np.ndarray
    G: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        d = self.dims
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        expected = {
            "A": (d.m_count, d.m_count),
            "G": (d.m_count, self.rank, self.rank, d.k_flat),
            "B": (d.c_in, self.rank),
            "C": (d.c_out, self.rank),
            "D": (d.k_flat, d.k_flat),
            "bias": (d.m_count, d.c_out),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")


# -- rank selection ----------------------------------------------------------


def cp_rank_for_budget(dims):
    """Largest CP rank whose factors fit the budget of one dense layer.

    The budget is C_in * C_out * K weights against (M + C_in + C_out + K) * R
    factor entries.  For linear layers (k_flat == 1) the kernel mode is
    dropped from both sides.  Clamped to at least 1.
    """
    d = dims
    if d.k_flat == 1:
        denom = d.m_count + d.c_in + d.c_out
    else:
        denom = d.m_count + d.c_in + d.c_out + d.k_flat
    return max(1, (d.c_in * d.c_out * d.k_flat) // denom)


def tucker_rank_for_budget(dims):
    """Largest Tucker rank meeting the one-dense-layer budget.

    Solves M*K*R^2 + (C_in + C_out)*R + M^2 + K^2 <= C_in * C_out * K for
    the largest integer R; infeasible when the discriminant is negative.
    Clamped to at least 1.
    """
    d = dims
    m, ci, co, k = d.m_count, d.c_in, d.c_out, d.k_flat
    s = ci + co
    disc = s * s - 4 * m * k * (m * m + k * k - k * ci * co)
    if disc < 0:
        raise ValueError(f"no Tucker rank meets the budget for dims {d}")
    budget = ci * co * k

    def cost(r):
        return m * k * r * r + s * r + m * m + k * k

    r = int((-s + math.sqrt(disc)) / (2 * m * k))
    # fix up float rounding against the exact integer quadratic
    while cost(r + 1) <= budget:
        r += 1
    while r >= 1 and cost(r) > budget:
        r -= 1
    return max(1, r)


# -- initialization ----------------------------------------------------------


def cp_init(dims, rank, rng, with_kernel_factor=None):
    """Fresh CP kernel: B, C, D Kaiming-normal, A all-ones, bias zero.

    The fan-in for all three Kaiming factors is C_in * K, the effective
    fan-in of the dense convolution they reconstruct.  All-ones A makes
    every model start from the same reconstructed weights.
    """
    d = dims
    if with_kernel_factor is None:
        with_kernel_factor = d.k_flat > 1
    fan_in = d.c_in * d.k_flat
    b = kaiming_normal(rng, (d.c_in, rank), fan_in)
    c = kaiming_normal(rng, (d.c_out, rank), fan_in)
    dd = kaiming_normal(rng, (d.k_flat, rank), fan_in) if with_kernel_factor else None
    return CpKernel(
        dims=d,
        rank=rank,
        A=np.ones((d.m_count, rank)),
        B=b,
        C=c,
        D=dd,
        bias=np.zeros((d.m_count, d.c_out)),
    )


def tucker_init(dims, rank, rng):
    """Fresh Tucker kernel.

    The core and the channel factors B, C are Kaiming-normal with the
    dense fan-in C_in * K; the uncompressed square factors start at
    all-ones (A, so every model begins identical, mirroring the CP
    scheme) and identity (D, keeping the core's kernel mode aligned with
    the actual kernel axis).  Bias starts at zero.
    """
    d = dims
    fan_in = d.c_in * d.k_flat
    return TuckerKernel(
        dims=d,
        rank=rank,
        A=np.ones((d.m_count, d.m_count)),
        G=kaiming_normal(rng, (d.m_count, rank, rank, d.k_flat), fan_in),
        B=kaiming_normal(rng, (d.c_in, rank), fan_in),
        C=kaiming_normal(rng, (d.c_out, rank), fan_in),
        D=np.eye(d.k_flat),
        bias=np.zeros((d.m_count, d.c_out)),
    )


# -- reconstruction ----------------------------------------------------------


def cp_reconstruct_full(kernel):
    """Dense joint tensor of shape (M, C_in, C_out, K): sum of rank-1 terms."""
    k = kernel
    if k.D is None:
        w = np.einsum("mr,ir,or->mio", k.A, k.B, k.C, optimize=True)
        return w[..., np.newaxis]
    return np.einsum("mr,ir,or,kr->miok", k.A, k.B, k.C, k.D, optimize=True)


def cp_reconstruct_slice(kernel, m):
    """Weights of model m, shape (C_in, C_out, K), without building the full tensor."""
    k = kernel
    _check_model_index(m, k.dims.m_count)
    a = k.A[m - 1]
    if k.D is None:
        return np.einsum("r,ir,or->io", a, k.B, k.C, optimize=True)[..., np.newaxis]
    return np.einsum("r,ir,or,kr->iok", a, k.B, k.C, k.D, optimize=True)


def tucker_reconstruct_slice(kernel, m):
    """Weights of model m from the Tucker form, shape (C_in, C_out, K)."""
    k = kernel
    _check_model_index(m, k.dims.m_count)
    a = k.A[m - 1]
    core = np.einsum("m,mrsk->rsk", a, k.G, optimize=True)
    return np.einsum("rsk,ir,os,lk->iol", core, k.B, k.C, k.D, optimize=True)


def _check_model_index(m, m_count):
    if not 1 <= m <= m_count:
        raise IndexError(f"model index {m} out of range 1..{m_count}")


# -- normalization -----------------------------------------------------------


def cp_normalize(kernel):
    """Rescale B, C, D to unit-norm columns, absorbing the norms into A.

    The reconstructed joint tensor is unchanged: each rank-1 term is
    multiplied and divided by the same column-norm product.
    """
    k = kernel
    b, nb = column_l2_normalize(k.B)
    c, nc = column_l2_normalize(k.C)
    if k.D is None:
        d, nd = None, 1.0
    else:
        d, nd = column_l2_normalize(k.D)
    return replace(k, A=k.A * (nb * nc * nd), B=b, C=c, D=d)


# -- parameter accounting ----------------------------------------------------


def param_count(kernel):
    """Number of stored parameters, biases included."""
    d = kernel.dims
    r = kernel.rank
    if isinstance(kernel, TuckerKernel):
        return (
            d.m_count * d.k_flat * r * r
            + (d.c_in + d.c_out) * r
            + d.m_count * d.m_count
            + d.k_flat * d.k_flat
            + d.m_count * d.c_out
        )
    factor_rows = d.m_count + d.c_in + d.c_out
    if kernel.D is not None:
        factor_rows += d.k_flat
    return factor_rows * r + d.m_count * d.c_out


def dense_equivalent_count(dims):
    """Parameters of the uncompressed family: M dense layers with biases."""
    d = dims
    return d.m_count * d.c_in * d.c_out * d.k_flat + d.m_count * d.c_out


def single_dense_count(dims):
    """Parameters of one dense layer (weights plus bias)."""
    d = dims
    return d.c_in * d.c_out * d.k_flat + d.c_out
