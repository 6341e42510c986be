"""Convolution kernels: numba-compiled loops with a pure-numpy fallback.

The three primitives below (forward, input gradient, weight gradient for a
strided, zero-padded 2-D convolution) dominate training time.  By default
they run as numba ``@njit`` loops; setting the environment variable
``LRHYPER_NO_NUMBA=1`` before import, or calling ``set_numba(False)`` at
runtime, selects vectorized numpy implementations instead (im2col via
stride tricks, which lowers to BLAS and tends to win on machines with few
cores).  Both paths operate on
float64 NCHW batches and agree to floating-point roundoff; reduction
orders differ between the paths, so cross-path comparisons need a
tolerance while each single path is bitwise reproducible.

Transposed convolution is expressed through the same primitives: its
forward pass is the input gradient of the matching convolution.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "use_numba",
    "set_numba",
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "conv2d_out_size",
]

try:
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

_active_numba = _HAVE_NUMBA and (
    os.environ.get("LRHYPER_NO_NUMBA", "") in ("", "0")
)


def use_numba():
    """True when the numba-compiled kernel path is active."""
    return _active_numba


def set_numba(flag):
    """Select the kernel path at runtime; returns the previous setting."""
    global _active_numba
    if flag and not _HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    previous = _active_numba
    _active_numba = bool(flag)
    return previous


def conv2d_out_size(size, k, stride, pad):
    """Output spatial size of a convolution along one axis."""
    return (size + 2 * pad - k) // stride + 1


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, ho, wo, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


# -- pure numpy path ---------------------------------------------------------


def _np_forward(x, w, stride, pad):
    xp = _pad2d(x, pad)
    cols = _im2col(xp, w.shape[2], w.shape[3], stride)
    return np.einsum("bchwkl,ockl->bohw", cols, w, optimize=True)


def _np_weight_grad(x, g, stride, pad, kh, kw):
    xp = _pad2d(x, pad)
    cols = _im2col(xp, kh, kw, stride)
    return np.einsum("bchwkl,bohw->ockl", cols, g, optimize=True)


def _np_input_grad(g, w, stride, pad, h, w_in):
    b = g.shape[0]
    ci = w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((b, ci, h + 2 * pad, w_in + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            patch = np.einsum("bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
            dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += patch
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


# -- numba path --------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _valid_range(k_off, stride, pad, in_size, out_size):
        # output positions p with 0 <= p*stride + k_off - pad < in_size
        lo = max(0, (pad - k_off + stride - 1) // stride)
        hi = min(out_size, (in_size - 1 - k_off + pad) // stride + 1)
        return lo, max(lo, hi)

    @njit(cache=True, parallel=True, fastmath=True)
    def _nb_forward(x, w, stride, pad, y):
        b, ci, h, w_in = x.shape
        co, _, kh, kw = w.shape
        ho, wo = y.shape[2], y.shape[3]
        y[:] = 0.0
        # weight-stationary: the inner loop runs contiguously over ow
        for bi in prange(b):
            for o in range(co):
                for c in range(ci):
                    for i in range(kh):
                        oh_lo, oh_hi = _valid_range(i, stride, pad, h, ho)
                        for j in range(kw):
                            wv = w[o, c, i, j]
                            ow_lo, ow_hi = _valid_range(j, stride, pad, w_in, wo)
                            for oh in range(oh_lo, oh_hi):
                                ih = oh * stride + i - pad
                                base = j - pad
                                for ow in range(ow_lo, ow_hi):
                                    y[bi, o, oh, ow] += (
                                        wv * x[bi, c, ih, ow * stride + base]
                                    )

    @njit(cache=True, parallel=True, fastmath=True)
    def _nb_input_grad(g, w, stride, pad, dx):
        b, ci, h, w_in = dx.shape
        co, _, kh, kw = w.shape
        ho, wo = g.shape[2], g.shape[3]
        dx[:] = 0.0
        # scatter form of the forward loop; batches are independent rows
        for bi in prange(b):
            for o in range(co):
                for c in range(ci):
                    for i in range(kh):
                        oh_lo, oh_hi = _valid_range(i, stride, pad, h, ho)
                        for j in range(kw):
                            wv = w[o, c, i, j]
                            ow_lo, ow_hi = _valid_range(j, stride, pad, w_in, wo)
                            for oh in range(oh_lo, oh_hi):
                                ih = oh * stride + i - pad
                                base = j - pad
                                for ow in range(ow_lo, ow_hi):
                                    dx[bi, c, ih, ow * stride + base] += (
                                        wv * g[bi, o, oh, ow]
                                    )

    @njit(cache=True, parallel=True, fastmath=True)
    def _nb_weight_grad(x, g, stride, pad, dw):
        b, ci, h, w_in = x.shape
        co, _, kh, kw = dw.shape
        ho, wo = g.shape[2], g.shape[3]
        for o in prange(co):
            for c in range(ci):
                for i in range(kh):
                    oh_lo, oh_hi = _valid_range(i, stride, pad, h, ho)
                    for j in range(kw):
                        ow_lo, ow_hi = _valid_range(j, stride, pad, w_in, wo)
                        base = j - pad
                        acc = 0.0
                        for bi in range(b):
                            for oh in range(oh_lo, oh_hi):
                                ih = oh * stride + i - pad
                                for ow in range(ow_lo, ow_hi):
                                    acc += (x[bi, c, ih, ow * stride + base]
                                            * g[bi, o, oh, ow])
                        dw[o, c, i, j] = acc


# -- public dispatch ---------------------------------------------------------


def conv2d_forward(x, w, stride=1, pad=0):
    """Strided zero-padded convolution of x[B,Ci,H,W] with w[Co,Ci,kh,kw]."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    ho = conv2d_out_size(x.shape[2], w.shape[2], stride, pad)
    wo = conv2d_out_size(x.shape[3], w.shape[3], stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"kernel {w.shape[2:]} with stride {stride}, pad {pad} does not fit "
            f"input of spatial size {x.shape[2:]}"
        )
    if not _active_numba:
        return _np_forward(x, w, stride, pad)
    y = np.empty((x.shape[0], w.shape[0], ho, wo))
    _nb_forward(x, w, stride, pad, y)
    return y


def conv2d_input_grad(g, w, stride, pad, in_spatial):
    """Gradient of conv2d_forward w.r.t. its input (also transposed-conv forward)."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    h, w_in = in_spatial
    if not _active_numba:
        return _np_input_grad(g, w, stride, pad, h, w_in)
    dx = np.empty((g.shape[0], w.shape[1], h, w_in))
    _nb_input_grad(g, w, stride, pad, dx)
    return dx


def conv2d_weight_grad(x, g, stride, pad, kernel):
    """Gradient of conv2d_forward w.r.t. its weights."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    kh, kw = kernel
    if not _active_numba:
        return _np_weight_grad(x, g, stride, pad, kh, kw)
    dw = np.empty((g.shape[1], x.shape[1], kh, kw))
    _nb_weight_grad(x, g, stride, pad, dw)
    return dw
