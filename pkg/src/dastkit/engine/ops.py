"""Differentiable operations on tensors.

Every public function validates shapes, computes the forward result with
numpy, and registers an adjoint on the active tape (if any). Adjoints skip
inputs that do not need gradients, so frozen parameters and constant inputs
cost nothing during backward. There is no implicit broadcasting beyond
``add_bias``; shapes must match exactly everywhere else.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ConfigurationError, ShapeError, Tensor, current_tape


def _register(inputs: Sequence[Tensor], out_data: np.ndarray, make_backward) -> Tensor:
    """Wrap ``out_data`` and record the op if a tape is active and needed.

    ``make_backward(needed)`` builds the adjoint closure; ``needed`` says per
    input whether a partial must be produced (None is fine otherwise).
    """
    tape = current_tape()
    out = Tensor(out_data)
    if tape is not None:
        needed = [t.requires_grad for t in inputs]
        if any(needed):
            tape.record(inputs, out, make_backward(needed))
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def make_backward(needed):
        return lambda g: (g if needed[0] else None, g if needed[1] else None)

    return _register((a, b), a.data + b.data, make_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def make_backward(needed):
        return lambda g: (g if needed[0] else None, -g if needed[1] else None)

    return _register((a, b), a.data - b.data, make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def make_backward(needed):
        return lambda g: (g * bd if needed[0] else None, g * ad if needed[1] else None)

    return _register((a, b), ad * bd, make_backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)

    def make_backward(needed):
        return lambda g: (g * f,)

    return _register((x,), x.data * f, make_backward)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def make_backward(needed):
        return lambda g: (g * out_data,)

    return _register((x,), out_data, make_backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias: [n,f]+[f] or [n,c,h,w]+[c].

    The single sanctioned broadcast in the engine.
    """
    if x.ndim == 2 and bias.shape == (x.shape[1],):
        out_data = x.data + bias.data
        reduce_axes = (0,)
        bshape = bias.shape
    elif x.ndim == 4 and bias.shape == (x.shape[1],):
        out_data = x.data + bias.data.reshape(1, -1, 1, 1)
        reduce_axes = (0, 2, 3)
        bshape = bias.shape
    else:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit input {x.shape}")

    def make_backward(needed):
        def backward(g):
            gx = g if needed[0] else None
            gb = g.sum(axis=reduce_axes).reshape(bshape) if needed[1] else None
            return gx, gb

        return backward

    return _register((x, bias), out_data, make_backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def make_backward(needed):
        return lambda g: (g * mask,)

    return _register((x,), x.data * mask, make_backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, x.dtype.type(1), x.dtype.type(slope))

    def make_backward(needed):
        return lambda g: (g * factor,)

    return _register((x,), x.data * factor, make_backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    xd = x.data
    out_data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                        np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)

    def make_backward(needed):
        return lambda g: (g * out_data * (1.0 - out_data),)

    return _register((x,), out_data, make_backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.shape

    def make_backward(needed):
        return lambda g: (g.reshape(in_shape),)

    return _register((x,), x.data.reshape(shape), make_backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch axis: [n, ...] -> [n, prod(...)]."""
    return reshape(x, (x.shape[0], -1))


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (duplicates sum)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.shape[0]} rows")
    in_shape = x.shape
    in_dtype = x.dtype

    def make_backward(needed):
        def backward(g):
            gx = np.zeros(in_shape, dtype=in_dtype)
            np.add.at(gx, idx, g)
            return (gx,)

        return backward

    return _register((x,), x.data[idx], make_backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; backward splits the gradient back."""
    if not parts:
        raise ShapeError("concat_rows: need at least one part")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_backward(needed):
        def backward(g):
            return tuple(
                g[offsets[i]:offsets[i + 1]] if needed[i] else None
                for i in range(len(sizes))
            )

        return backward

    return _register(tuple(parts), np.concatenate([p.data for p in parts], axis=0),
                     make_backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    in_shape = x.shape
    in_dtype = x.dtype

    def make_backward(needed):
        return lambda g: (np.full(in_shape, g, dtype=in_dtype),)

    return _register((x,), np.asarray(x.data.sum(), dtype=in_dtype), make_backward)


def mean_all(x: Tensor) -> Tensor:
    in_shape = x.shape
    in_dtype = x.dtype
    n = x.size

    def make_backward(needed):
        return lambda g: (np.full(in_shape, g / n, dtype=in_dtype),)

    return _register((x,), np.asarray(x.data.mean(), dtype=in_dtype), make_backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def make_backward(needed):
        def backward(g):
            ga = g @ bd.T if needed[0] else None
            gb = ad.T @ g if needed[1] else None
            return ga, gb

        return backward

    return _register((a, b), ad @ bd, make_backward)


# ---------------------------------------------------------------------------
# softmax / losses


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows are >= 0 and sum to 1."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax: expected [batch, classes], got {logits.shape}")
    p = _softmax(logits.data)

    def make_backward(needed):
        def backward(g):
            dot = (g * p).sum(axis=1, keepdims=True)
            return (p * (g - dot),)

        return backward

    return _register((logits,), p, make_backward)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim != 1:
        raise ShapeError(f"labels must be a vector, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise IndexError(
            f"label out of range [0, {num_classes}): min={lab.min()}, max={lab.max()}")
    return lab


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]; always >= 0."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [batch, classes], got {logits.shape}")
    n, num_classes = logits.shape
    lab = _check_labels(labels, num_classes)
    if lab.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {lab.shape[0]} labels")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(n), lab]
    out_data = np.asarray(losses.mean(), dtype=z.dtype)

    def make_backward(needed):
        def backward(g):
            dz = _softmax(z)
            dz[np.arange(n), lab] -= 1.0
            return (dz * (g / n),)

        return backward

    return _register((logits,), out_data, make_backward)


def frobenius_distance(a: Tensor, b: Tensor) -> Tensor:
    """sqrt of the summed squared differences over the whole batch, / batch size.

    The batch size is the leading axis length (1 for rank-1 inputs). At a == b
    the true derivative is undefined; the zero subgradient is used so training
    at the optimum stays finite.
    """
    _check_same_shape(a, b, "frobenius_distance")
    batch = a.shape[0] if a.ndim >= 2 else 1
    diff = a.data - b.data
    total = float((diff * diff).sum())
    root = np.sqrt(total)
    out_data = np.asarray(root / batch, dtype=a.dtype)

    def make_backward(needed):
        def backward(g):
            if root == 0.0:
                fac = np.zeros_like(diff)
            else:
                coef = np.asarray(g / (batch * root), dtype=diff.dtype)
                fac = diff * coef
            ga = fac if needed[0] else None
            gb = -fac if needed[1] else None
            return ga, gb

        return backward

    return _register((a, b), out_data, make_backward)


# ---------------------------------------------------------------------------
# convolution family
#
# Three numpy kernels (forward product, input adjoint, kernel adjoint) are
# shared by conv2d and conv2d_transposed: the transposed forward IS the conv
# input adjoint with the same geometry, which makes the inner-product identity
# <conv(x,K), y> == <x, conv_t(y,K)> hold to machine precision by construction.


def _conv_out_size(h: int, k: int, stride: int, padding: int, what: str) -> int:
    span = h + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"{what}: input size {h} with kernel {k}, stride {stride}, "
            f"padding {padding} gives no integer output size")
    out = span // stride + 1
    if out <= 0:
        raise ConfigurationError(f"{what}: non-positive output size {out}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[n,c,h,w] -> [n, c*kh*kw, ho*wo] patch matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return windows.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
            padding: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back to [n,c,h,w]."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n = x.shape[0]
    co, ci, kh, kw = k.shape
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride, padding)
    y = np.matmul(k.reshape(co, -1), cols)
    return y.reshape(n, co, ho, wo)


def _conv_grad_x(dy: np.ndarray, k: np.ndarray, x_shape, stride: int,
                 padding: int) -> np.ndarray:
    co, ci, kh, kw = k.shape
    n = dy.shape[0]
    dy2 = dy.reshape(n, co, -1)
    dcols = np.matmul(k.reshape(co, -1).T, dy2)
    return _col2im(dcols, x_shape, kh, kw, stride, padding)


def _conv_grad_k(dy: np.ndarray, x: np.ndarray, k_shape, stride: int,
                 padding: int) -> np.ndarray:
    co, ci, kh, kw = k_shape
    n = x.shape[0]
    cols = _im2col(x, kh, kw, stride, padding)
    dy2 = dy.reshape(n, co, -1)
    dk = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0)
    return dk.reshape(k_shape)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [n,ci,h,w] with kernel [co,ci,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match kernel {kernel.shape}")
    co, ci, kh, kw = kernel.shape
    _conv_out_size(x.shape[2], kh, stride, padding, "conv2d")
    _conv_out_size(x.shape[3], kw, stride, padding, "conv2d")
    xd, kd = x.data, kernel.data
    x_shape, k_shape = x.shape, kernel.shape

    def make_backward(needed):
        def backward(g):
            gx = _conv_grad_x(g, kd, x_shape, stride, padding) if needed[0] else None
            gk = _conv_grad_k(g, xd, k_shape, stride, padding) if needed[1] else None
            return gx, gk

        return backward

    return _register((x, kernel), _conv_forward(xd, kd, stride, padding), make_backward)


def conv2d_transposed(x: Tensor, kernel: Tensor, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Adjoint of conv2d with the same geometry: [n,ci,h,w] -> [n,co,h',w'].

    Kernel layout is [ci,co,kh,kw]; the forward pass equals conv2d's
    input-gradient computation, so h' = (h-1)*stride - 2*padding + kh.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d_transposed: need 4-d input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"conv2d_transposed: input channels {x.shape} do not match kernel {kernel.shape}")
    ci, co, kh, kw = kernel.shape
    n, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(
            f"conv2d_transposed: output size {ho}x{wo} is not positive for "
            f"input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}")
    # In conv2d terms the kernel maps co -> ci, so reuse it as [ci(out), co(in)].
    out_shape = (n, co, ho, wo)
    xd, kd = x.data, kernel.data
    k_shape = kernel.shape

    def make_backward(needed):
        def backward(g):
            gx = _conv_forward(g, kd, stride, padding) if needed[0] else None
            gk = _conv_grad_k(xd, g, k_shape, stride, padding) if needed[1] else None
            return gx, gk

        return backward

    return _register((x, kernel), _conv_grad_x(xd, kd, out_shape, stride, padding),
                     make_backward)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (batch, height, width), training form."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d: expected [n,c,h,w], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm2d: gamma {gamma.shape} / beta {beta.shape} do not fit {c} channels")
    xd = x.data
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    gview = gamma.data.reshape(1, c, 1, 1)
    out_data = xhat * gview + beta.data.reshape(1, c, 1, 1)

    def make_backward(needed):
        def backward(g):
            ggamma = (g * xhat).sum(axis=axes) if needed[1] else None
            gbeta = g.sum(axis=axes) if needed[2] else None
            if needed[0]:
                gsum = g.sum(axis=axes, keepdims=True)
                gx_sum = (g * xhat).sum(axis=axes, keepdims=True)
                gx = (gview * inv_std / m) * (m * g - gsum - xhat * gx_sum)
            else:
                gx = None
            return gx, ggamma, gbeta

        return backward

    return _register((x, gamma, beta), out_data, make_backward)


def batch_norm2d_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      eps: float = 1e-5) -> Tensor:
    """Batch normalization with frozen statistics (inference form)."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d_eval: expected [n,c,h,w], got {x.shape}")
    c = x.shape[1]
    inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
    centered = x.data - running_mean.reshape(1, c, 1, 1)
    xhat = centered * inv_std
    gview = gamma.data.reshape(1, c, 1, 1)
    out_data = xhat * gview + beta.data.reshape(1, c, 1, 1)

    def make_backward(needed):
        def backward(g):
            gx = g * gview * inv_std if needed[0] else None
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if needed[1] else None
            gbeta = g.sum(axis=(0, 2, 3)) if needed[2] else None
            return gx, ggamma, gbeta

        return backward

    return _register((x, gamma, beta), out_data, make_backward)


# ---------------------------------------------------------------------------
# forward-only helpers


def argmax_rows(t: Tensor) -> np.ndarray:
    """Row argmax with lowest-index tie-break; never differentiable."""
    if t.ndim != 2:
        raise ShapeError(f"argmax_rows: expected [batch, classes], got {t.shape}")
    return np.argmax(t.data, axis=1)
