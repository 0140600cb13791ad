"""Differentiable primitives and the composites built from them.

Image tensors use channels-last layout ``[batch, height, width, channels]``:
the 3x3 convolution then reduces to one contiguous im2col copy and a single
matrix product. Backward rules only call functions from this module, which is
what makes nested differentiation work.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, active_tape, as_tensor, make_output


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {list(a.shape)} with {list(b.shape)}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return make_output("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return make_output("sub", a.data - b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_output("neg", -a.data, (a,), lambda g, needs: (neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar (a constant, never differentiated)."""
    c = float(c)
    return make_output("scale", a.data * a.dtype.type(c), (a,),
                       lambda g, needs: (scale(g, c),))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return make_output("mul", a.data * b.data, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    p = float(p)
    if p == 1.0:
        return make_output("power", a.data.copy(), (a,), lambda g, needs: (g,))

    def bw(g, needs):
        return (mul(g, scale(power(a, p - 1.0), p)),)

    return make_output("power", np.power(a.data, a.dtype.type(p)), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    holder = {}

    def bw(g, needs):
        return (mul(g, holder["out"]),)

    out = make_output("exp", out_data, (a,), bw)
    holder["out"] = out
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return make_output("log", data, (a,), lambda g, needs: (mul(g, power(a, -1.0)),))


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array; linear in ``a``."""
    mask = np.asarray(mask, dtype=a.dtype)
    if mask.shape != a.shape:
        raise ShapeError("mask_mul", f"mask {list(mask.shape)} vs input {list(a.shape)}")
    return make_output("mask_mul", a.data * mask, (a,),
                       lambda g, needs: (mask_mul(g, mask),))


def relu(a: Tensor) -> Tensor:
    # Derivative at exactly zero is taken as zero.
    mask = (a.data > 0).astype(a.dtype)
    return make_output("relu", a.data * mask, (a,),
                       lambda g, needs: (mask_mul(g, mask),))


# ----------------------------------------------------------- shape and layout

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {list(a.shape)} to {list(shape)}") from None
    src = a.shape
    return make_output("reshape", data, (a,),
                       lambda g, needs: (reshape(g, src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {list(axes)} invalid for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return make_output("transpose", a.data.transpose(axes), (a,),
                       lambda g, needs: (transpose(g, inverse),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {list(a.shape)} to {list(shape)}") from None
    src = a.shape
    return make_output("broadcast_to", data, (a,), lambda g, needs: (sum_to(g, src),))


def _sum_to_axes(src, shape):
    lead = len(src) - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", f"cannot reduce {list(src)} to {list(shape)}")
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and src[lead + i] != 1:
            axes.append(lead + i)
        elif s != src[lead + i]:
            raise ShapeError("sum_to", f"cannot reduce {list(src)} to {list(shape)}")
    return tuple(axes)


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum out broadcast dimensions so the result has ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    axes = _sum_to_axes(a.shape, shape)
    data = a.data.sum(axis=axes).reshape(shape) if axes else a.data.reshape(shape)
    src = a.shape
    return make_output("sum_to", data, (a,), lambda g, needs: (broadcast_to(g, src),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(x % ndim for x in axis))


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    src = a.shape

    def bw(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return make_output("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes], dtype=np.int64))
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expects rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner extents differ: {list(a.shape)} @ {list(b.shape)}")

    def bw(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return make_output("matmul", a.data @ b.data, (a, b), bw)


# ------------------------------------------------------------ image primitives

def im2col3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 patches: ``[B,H,W,C] -> [B*H*W, 9*C]``.

    Column order is (dy, dx, channel), matching :func:`conv2d`'s weight layout.
    """
    if x.ndim != 4:
        raise ShapeError("im2col3x3", f"expects [B,H,W,C], got {list(x.shape)}")
    B, H, W, C = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, H, W, 9 * C), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[..., k * C:(k + 1) * C] = xp[:, dy:dy + H, dx:dx + W, :]
            k += 1
    shape = x.shape
    return make_output("im2col3x3", cols.reshape(B * H * W, 9 * C), (x,),
                       lambda g, needs: (col2im3x3(g, shape),))


def col2im3x3(cols: Tensor, shape) -> Tensor:
    """Adjoint of :func:`im2col3x3`: scatter-add patches back to ``[B,H,W,C]``."""
    B, H, W, C = shape
    if cols.shape != (B * H * W, 9 * C):
        raise ShapeError("col2im3x3", f"columns {list(cols.shape)} do not match image {list(shape)}")
    src = cols.data.reshape(B, H, W, 9, C)
    acc = np.zeros((B, H + 2, W + 2, C), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            acc[:, dy:dy + H, dx:dx + W, :] += src[:, :, :, k, :]
            k += 1
    data = np.ascontiguousarray(acc[:, 1:H + 1, 1:W + 1, :])
    return make_output("col2im3x3", data, (cols,), lambda g, needs: (im2col3x3(g),))


_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_select(x: Tensor, masks, values=None) -> Tensor:
    """Pick one element per 2x2 window; ``masks[k]`` flags windows taking corner k."""
    if values is None:
        values = x.data[:, 0::2, 0::2, :] * masks[0]
        for k, (dy, dx) in enumerate(_CORNERS[1:], start=1):
            values += x.data[:, dy::2, dx::2, :] * masks[k]
    src = x.shape
    return make_output("pool_select", values, (x,),
                       lambda g, needs: (_pool_scatter(g, masks, src),))


def _pool_scatter(g: Tensor, masks, shape) -> Tensor:
    """Adjoint of :func:`_pool_select`; each window receives one value."""
    data = np.empty(shape, dtype=g.dtype)
    for k, (dy, dx) in enumerate(_CORNERS):
        np.multiply(g.data, masks[k], out=data[:, dy::2, dx::2, :])
    return make_output("pool_scatter", data, (g,),
                       lambda gg, needs: (_pool_select(gg, masks),))


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on ``[B,H,W,C]``.

    Gradient goes to the first maximal element of each window in row-major
    scan order.
    """
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("max_pool2d", f"expects [B,H,W,C] with even H and W, got {list(x.shape)}")
    corners = [x.data[:, dy::2, dx::2, :] for dy, dx in _CORNERS]
    best = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    # taken[k]: window already matched at some corner <= k (first-max rule).
    masks = []
    taken = None
    for k in range(4):
        hit = corners[k] == best
        if taken is None:
            first, taken = hit, hit
        else:
            first = hit & ~taken
            taken = taken | hit
        masks.append(first.astype(x.dtype))
    return _pool_select(x, masks, values=best)


# ----------------------------------------------------------------- composites

def conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero same-padding.

    ``x`` is ``[B,H,W,Cin]``; ``weight`` is ``[Cout,Cin,3,3]``.
    """
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError("conv2d", f"weight must be [Cout,Cin,3,3], got {list(weight.shape)}")
    if x.ndim != 4 or x.shape[3] != weight.shape[1]:
        raise ShapeError("conv2d", f"input {list(x.shape)} does not match weight {list(weight.shape)}")
    B, H, W, _ = x.shape
    cout, cin = weight.shape[:2]
    wmat = reshape(transpose(weight, (2, 3, 1, 0)), (9 * cin, cout))
    return reshape(matmul(im2col3x3(x), wmat), (B, H, W, cout))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation with statistics of the current batch.

    Channels are the last axis; variance is the biased batch estimate.
    """
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("batch_norm", f"scale/shift {list(gamma.shape)}/{list(beta.shape)} "
                                       f"do not match {x.shape[-1]} channels")
    axes = tuple(range(x.ndim - 1))
    xc = x.data - x.data.mean(axis=axes)
    inv_std = 1.0 / np.sqrt(np.mean(xc * xc, axis=axes) + x.dtype.type(eps))
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g, needs):
        if active_tape() is None:
            gd = g.data
            dbeta = gd.sum(axis=axes)
            dgamma = (gd * xhat).sum(axis=axes)
            dx = None
            if needs[0]:
                n = gd.size // gd.shape[-1]
                dx = Tensor((gamma.data * inv_std / n) * (n * gd - dbeta - xhat * dgamma))
            return dx, Tensor(dgamma), Tensor(dbeta)
        dx = _bn_input_grad(x, gamma, g, xhat, inv_std) if needs[0] else None
        return dx, _bn_scale_grad(x, g, xhat, inv_std), sum(g, axis=axes)

    return make_output("batch_norm", out, (x, gamma, beta), bw)


def _no_third_order(op):
    if active_tape() is not None:
        raise NotImplementedError(f"{op}: third-order derivatives through batch norm are not supported")


def _bn_input_grad(x, gamma, g, xhat, inv_std) -> Tensor:
    """dL/dx of batch norm, ``gamma*s*(g - mean(g) - xhat*mean(g*xhat))``."""
    axes = tuple(range(x.ndim - 1))
    n = x.size // x.shape[-1]
    gd = g.data
    g_c = gd - gd.mean(axis=axes)
    G = (gd * xhat).sum(axis=axes)
    out = (gamma.data * inv_std) * (g_c - xhat * (G / n))

    def bw(u, needs):
        _no_third_order("batch_norm")
        ud = u.data
        u_c = ud - ud.mean(axis=axes)
        U = (ud * xhat).sum(axis=axes)
        gx = ggamma = gg = None
        if needs[0]:
            A = (ud * g_c).sum(axis=axes)
            coef = gamma.data * inv_std * inv_std / n
            gx = Tensor(coef * ((3.0 * G * U / n - A) * xhat - U * g_c - G * u_c))
        if needs[1]:
            ggamma = Tensor(inv_std * (ud * (g_c - xhat * (G / n))).sum(axis=axes))
        if needs[2]:
            gg = Tensor((gamma.data * inv_std) * (u_c - xhat * (U / n)))
        return gx, ggamma, gg

    return make_output("bn_input_grad", out, (x, gamma, g), bw)


def _bn_scale_grad(x, g, xhat, inv_std) -> Tensor:
    """dL/dgamma of batch norm, ``sum(g*xhat)`` per channel."""
    axes = tuple(range(x.ndim - 1))
    n = x.size // x.shape[-1]
    gd = g.data
    G = (gd * xhat).sum(axis=axes)

    def bw(a, needs):
        _no_third_order("batch_norm")
        ad = a.data
        gx = gg = None
        if needs[0]:
            gx = Tensor((ad * inv_std) * (gd - gd.mean(axis=axes) - xhat * (G / n)))
        if needs[1]:
            gg = Tensor(ad * xhat)
        return gx, gg

    return make_output("bn_scale_grad", G, (x, g), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return matmul(x, weight) + bias


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a ``[B, N]`` matrix."""
    if x.ndim != 2:
        raise ShapeError("log_softmax", f"expects [B,N], got {list(x.shape)}")
    # The shift is a constant; the result is invariant to it.
    shifted = x - x.data.max(axis=1, keepdims=True)
    return shifted - log(sum(exp(shifted), axis=1, keepdims=True))


def nll_loss(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels)
    B, N = log_probs.shape
    if labels.shape != (B,):
        raise ShapeError("nll_loss", f"labels {list(labels.shape)} vs batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= N):
        raise ValueError(f"nll_loss: labels must lie in [0, {N})")
    onehot = np.zeros((B, N), dtype=log_probs.dtype)
    onehot[np.arange(B), labels] = 1
    return scale(sum(mask_mul(log_probs, onehot)), -1.0 / B)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return nll_loss(log_softmax(logits), labels)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "scale": scale,
    "mul": mul,
    "power": power,
    "exp": exp,
    "log": log,
    "mask_mul": mask_mul,
    "relu": relu,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "sum_to": sum_to,
    "sum": sum,
    "mean": mean,
    "matmul": matmul,
    "im2col3x3": im2col3x3,
    "col2im3x3": col2im3x3,
    "max_pool2d": max_pool2d,
    "conv2d": conv2d,
    "batch_norm": batch_norm,
    "linear": linear,
    "log_softmax": log_softmax,
    "nll_loss": nll_loss,
    "cross_entropy": cross_entropy,
}


def record_op(tape, op_kind: str, inputs, **attrs) -> Tensor:
    """Apply primitive ``op_kind`` to ``inputs`` with ``tape`` active."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    with tape:
        return fn(*inputs, **attrs)

