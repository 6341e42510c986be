"""Define-by-run reverse-mode differentiation over numpy arrays.

Forward values are computed eagerly; each result remembers its parents and
a local vector-Jacobian rule.  ``backward`` walks the recorded graph once
in reverse topological order and accumulates gradients into every node it
reaches.  Gradients add up across repeated backward calls until
``zero_grad`` resets them, so the gradient of a sum of losses equals the
sum of per-loss gradients.

A graph is single-threaded by contract; independent graphs over disjoint
parameters may run concurrently.
"""

import numpy as np

from lrhyper import backend

__all__ = [
    "Node",
    "as_node",
    "backward",
    "zero_grad",
    "grad_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "einsum2",
    "reshape",
    "transpose",
    "concat",
    "take_row",
    "gather_channel",
    "reduce_sum",
    "reduce_mean",
    "exp",
    "log",
    "leaky_relu",
    "log_softmax",
    "conv2d",
    "conv_transpose2d",
    "instance_norm",
    "layer_norm",
    "check_gradients",
]


class Node:
    """One recorded value: payload array, parents, and a backward rule."""

    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp  # vjp(g) -> tuple of parent gradients
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # operator sugar; non-Node operands are treated as constants
    def __add__(self, other):
        return add(self, as_node(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_node(other))

    def __rtruediv__(self, other):
        return div(as_node(other), self)

    def __neg__(self):
        return neg(self)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def backward(loss):
    """Populate gradients of every node reachable from a scalar loss."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    order = []
    seen = {id(loss)}
    stack = [(loss, iter(loss.parents))]
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            order.append(node)
            stack.pop()
        elif id(child) not in seen:
            seen.add(id(child))
            stack.append((child, iter(child.parents)))
    loss.accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is not None:
                parent.accumulate(g)


def zero_grad(nodes):
    for n in nodes:
        n.grad = None


def grad_of(node):
    """Gradient buffer, zeros when the node was unreachable from the loss."""
    return node.grad if node.grad is not None else np.zeros_like(node.value)


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# -- elementwise and structural ops ------------------------------------------


def add(a, b):
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b):
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b):
    return Node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b):
    return Node(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def neg(a):
    return Node(-a.value, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a):
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def leaky_relu(a, slope=0.01):
    mask = np.where(a.value > 0.0, 1.0, slope)
    return Node(a.value * mask, (a,), lambda g: (g * mask,))


def reshape(a, shape):
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return Node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(nodes, axis):
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_row(a, i):
    """Row i of a 2-D (or higher) node along the first axis."""

    def vjp(g):
        da = np.zeros_like(a.value)
        da[i] = g
        return (da,)

    return Node(a.value[i], (a,), vjp)


def gather_channel(a, index):
    """Pick a[b, index[b,...], ...] along axis 1 with an integer index map."""
    index = np.asarray(index)
    b = np.arange(a.value.shape[0])

    def _key():
        if index.ndim == 1:
            return (b, index)
        grids = np.meshgrid(*[np.arange(s) for s in index.shape], indexing="ij")
        return (grids[0], index) + tuple(grids[1:])

    def pick(arr):
        return arr[_key()]

    def vjp(g):
        da = np.zeros_like(a.value)
        np.add.at(da, _key(), g)
        return (da,)

    return Node(pick(a.value), (a,), vjp)


def reduce_sum(a, axis=None, keepdims=False):
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.value.shape).copy(),)

    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.value.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.value.shape[i] for i in axis]))
    else:
        count = a.value.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- contractions ------------------------------------------------------------


def einsum2(spec, a, b):
    """Two-operand einsum with automatic vector-Jacobian products.

    Every index of each input must appear in the other input or in the
    output, which holds for ordinary contractions.
    """
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for ch in sa:
        if ch not in sb and ch not in out:
            raise ValueError(f"index {ch!r} of first operand is unpaired in {spec!r}")
    for ch in sb:
        if ch not in sa and ch not in out:
            raise ValueError(f"index {ch!r} of second operand is unpaired in {spec!r}")

    def vjp(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.value, optimize=True)
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.value, optimize=True)
        return ga, gb

    return Node(np.einsum(spec, a.value, b.value, optimize=True), (a, b), vjp)


# -- activations with stable reductions --------------------------------------


def log_softmax(a, axis=1):
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logz
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Node(out, (a,), vjp)


# -- convolutions ------------------------------------------------------------


def conv2d(x, w, stride=1, pad=0):
    """Convolution of x[B,Ci,H,W] with w[Co,Ci,kh,kw]."""
    in_spatial = x.value.shape[2:]
    kernel = w.value.shape[2:]

    def vjp(g):
        gx = backend.conv2d_input_grad(g, w.value, stride, pad, in_spatial)
        gw = backend.conv2d_weight_grad(x.value, g, stride, pad, kernel)
        return gx, gw

    return Node(backend.conv2d_forward(x.value, w.value, stride, pad), (x, w), vjp)


def conv_transpose2d(x, w, stride=1, pad=0):
    """Transposed convolution (adjoint of conv2d) with w[Ci,Co,kh,kw]."""
    kh, kw = w.value.shape[2:]
    h, w_in = x.value.shape[2:]
    out_spatial = ((h - 1) * stride - 2 * pad + kh, (w_in - 1) * stride - 2 * pad + kw)

    def vjp(g):
        gx = backend.conv2d_forward(g, w.value, stride, pad)
        gw = backend.conv2d_weight_grad(g, x.value, stride, pad, (kh, kw))
        return gx, gw

    return Node(
        backend.conv2d_input_grad(x.value, w.value, stride, pad, out_spatial),
        (x, w),
        vjp,
    )


# -- normalization layers ----------------------------------------------------


def instance_norm(x, gain, bias, eps=1e-5):
    """Per-sample, per-channel standardization of x[B,C,H,W] plus affine.

    Gradients flow through the mean and variance.  When a channel's
    variance is below eps, eps dominates and the output approaches the
    affine bias instead of blowing up.
    """
    v = x.value
    if v.shape[2] * v.shape[3] < 2:
        raise ValueError("instance norm needs spatial size >= 2 per channel")
    mu = v.mean(axis=(2, 3), keepdims=True)
    var = v.var(axis=(2, 3), keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (v - mu) / sigma
    gam = gain.value[None, :, None, None]
    out = gam * xhat + bias.value[None, :, None, None]

    def vjp(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dbias = g.sum(axis=(0, 2, 3))
        dxhat = g * gam
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        dx = (dxhat - m1 - xhat * m2) / sigma
        return dx, dgain, dbias

    return Node(out, (x, gain, bias), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardization of x[B,F] over the feature axis plus affine."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (v - mu) / sigma
    out = gain.value * xhat + bias.value

    def vjp(g):
        dgain = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        dbias = g.sum(axis=tuple(range(g.ndim - 1)))
        dxhat = g * gain.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) / sigma
        return dx, dgain, dbias

    return Node(out, (x, gain, bias), vjp)


# -- finite-difference checking ----------------------------------------------


def check_gradients(f, params, h=1e-4, samples_per_param=50, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current parameter values and returns
    a scalar Node.  Up to ``samples_per_param`` coordinates are probed per
    parameter tensor (all of them for small tensors).
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step size h={h} outside [1e-5, 1e-2]")
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("objective evaluated to a non-finite value")
    backward(loss)
    analytic = [grad_of(p).copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples_per_param else rng.choice(
            n, size=samples_per_param, replace=False
        )
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().value)
            flat[i] = orig - h
            fm = float(f().value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("objective evaluated to a non-finite value")
            numeric = (fp - fm) / (2.0 * h)
            a = ga.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
