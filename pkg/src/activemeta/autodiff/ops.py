"""Differentiable operations.

Every backward rule is expressed with ops from this module, so any gradient
can itself be recorded and differentiated.  Broadcasting is limited to a
scalar (shape ``()``) combined with a tensor.
"""

from __future__ import annotations

import numpy as np

from ..errors import LabelRangeError, ShapeError
from . import kernels as K
from .tensor import Tensor, record


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _scalar_pair(op: str, a: Tensor, b: Tensor) -> tuple[bool, bool]:
    if a.shape == b.shape:
        return False, False
    if a.shape == ():
        return True, False
    if b.shape == ():
        return False, True
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: Tensor, is_scalar: bool) -> Tensor:
    return sum_all(g) if is_scalar else g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = _scalar_pair("add", a, b)

    def backward(g, inputs, ctx, needs):
        return (_reduce_to(g, sa) if needs[0] else None,
                _reduce_to(g, sb) if needs[1] else None)

    return record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = _scalar_pair("sub", a, b)

    def backward(g, inputs, ctx, needs):
        return (_reduce_to(g, sa) if needs[0] else None,
                _reduce_to(neg(g), sb) if needs[1] else None)

    return record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = _scalar_pair("mul", a, b)

    def backward(g, inputs, ctx, needs):
        x, y = inputs
        return (_reduce_to(mul(g, y), sa) if needs[0] else None,
                _reduce_to(mul(g, x), sb) if needs[1] else None)

    return record("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)

    def backward(g, inputs, ctx, needs):
        return (scale(g, c),)

    return record("scale", a.data * c, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)

    def backward(g, inputs, ctx, needs):
        return (mul(g, Tensor._wrap(ctx)),)

    return record("relu", a.data * mask, (a,), backward, mask)


# reductions and reshapes ---------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g, inputs, ctx, needs):
        return (expand(g, shape),)

    return record("sum_all", np.asarray(a.data.sum()), (a,), backward)


def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if a.shape != ():
        raise ShapeError("expand", a.shape, shape, detail="only scalars expand")
    shape = tuple(shape)

    def backward(g, inputs, ctx, needs):
        return (sum_all(g),)

    return record("expand", np.broadcast_to(a.data, shape).copy(), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    orig = a.shape

    def backward(g, inputs, ctx, needs):
        return (reshape(g, orig),)

    return record("reshape", a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expects a matrix")

    def backward(g, inputs, ctx, needs):
        return (transpose(g),)

    return record("transpose", np.ascontiguousarray(a.data.T), (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g, inputs, ctx, needs):
        x, y = inputs
        return (matmul(g, transpose(y)) if needs[0] else None,
                matmul(transpose(x), g) if needs[1] else None)

    return record("matmul", a.data @ b.data, (a, b), backward)


def sum_spatial(a: Tensor) -> Tensor:
    """``[C, H, W] -> [C]``."""
    if a.ndim != 3:
        raise ShapeError("sum_spatial", a.shape)
    hw = a.shape[1:]

    def backward(g, inputs, ctx, needs):
        return (expand_spatial(g, hw),)

    return record("sum_spatial", a.data.sum(axis=(1, 2)), (a,), backward)


def expand_spatial(a: Tensor, hw: tuple[int, int]) -> Tensor:
    """``[C] -> [C, H, W]``."""
    if a.ndim != 1:
        raise ShapeError("expand_spatial", a.shape)
    h, w = hw

    def backward(g, inputs, ctx, needs):
        return (sum_spatial(g),)

    out = np.broadcast_to(a.data[:, None, None], (a.shape[0], h, w)).copy()
    return record("expand_spatial", out, (a,), backward)


def sum_channels(a: Tensor) -> Tensor:
    """``[K, ...] -> [...]``."""
    k = a.shape[0]

    def backward(g, inputs, ctx, needs):
        return (expand_channels(g, k),)

    return record("sum_channels", a.data.sum(axis=0), (a,), backward)


def expand_channels(a: Tensor, k: int) -> Tensor:
    """``[...] -> [K, ...]``."""

    def backward(g, inputs, ctx, needs):
        return (sum_channels(g),)

    out = np.broadcast_to(a.data, (k, *a.shape)).copy()
    return record("expand_channels", out, (a,), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``[C]`` to ``[C, H, W]``."""
    if x.ndim != 3 or b.shape != (x.shape[0],):
        raise ShapeError("bias_add", x.shape, b.shape)

    def backward(g, inputs, ctx, needs):
        return g, (sum_spatial(g) if needs[1] else None)

    return record("bias_add", K.bias_add(x.data, b.data), (x, b), backward)


# convolution family --------------------------------------------------------
# conv2d, conv2d_input_grad and conv2d_weight_grad are bilinear and pairwise
# adjoint, so each one's backward is expressed with the other two.

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [C_in, H, W]`` with ``w [C_out, C_in, kH, kW]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail=f"stride={stride} padding={padding}")
    geom = K.ConvGeom(int(stride), int(padding), x.shape[1], x.shape[2], w.shape[2], w.shape[3])
    if geom.out_h < 1 or geom.out_w < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    return _conv(x, w, geom)


def _conv(x: Tensor, w: Tensor, geom: K.ConvGeom) -> Tensor:
    cols = K.im2col(x.data, geom)

    def backward(g, inputs, ctx, needs):
        xi, wi = inputs
        return (_conv_input_grad(g, wi, geom) if needs[0] else None,
                _conv_weight_grad(xi, g, geom, cols=ctx) if needs[1] else None)

    return record("conv2d", K.conv2d(x.data, w.data, geom, cols=cols), (x, w), backward, cols)


def _conv_input_grad(gy: Tensor, w: Tensor, geom: K.ConvGeom) -> Tensor:
    def backward(g, inputs, ctx, needs):
        gyi, wi = inputs
        return (_conv(g, wi, geom) if needs[0] else None,
                _conv_weight_grad(g, gyi, geom) if needs[1] else None)

    return record("conv2d_input_grad", K.conv2d_input_grad(gy.data, w.data, geom), (gy, w), backward)


def _conv_weight_grad(x: Tensor, gy: Tensor, geom: K.ConvGeom, cols=None) -> Tensor:
    def backward(g, inputs, ctx, needs):
        xi, gyi = inputs
        return (_conv_input_grad(gyi, g, geom) if needs[0] else None,
                _conv(xi, g, geom) if needs[1] else None)

    out = K.conv2d_weight_grad(x.data, gy.data, geom, cols=cols)
    return record("conv2d_weight_grad", out, (x, gy), backward)


# pooling / upsampling ------------------------------------------------------

def _check_even(op: str, a: Tensor) -> None:
    if a.ndim != 3 or a.shape[1] % 2 or a.shape[2] % 2:
        raise ShapeError(op, a.shape, detail="expects [C, H, W] with even H and W")


def max_pool2(a: Tensor) -> Tensor:
    _check_even("max_pool2", a)
    vals, idx = K.max_pool2(a.data)

    def backward(g, inputs, ctx, needs):
        return (_unpool2(g, ctx),)

    return record("max_pool2", vals, (a,), backward, idx)


def _unpool2(g: Tensor, idx: np.ndarray) -> Tensor:
    def backward(gg, inputs, ctx, needs):
        return (_gather_pool2(gg, idx),)

    return record("unpool2", K.unpool2(g.data, idx), (g,), backward)


def _gather_pool2(a: Tensor, idx: np.ndarray) -> Tensor:
    def backward(g, inputs, ctx, needs):
        return (_unpool2(g, idx),)

    return record("gather_pool2", K.gather_pool2(a.data, idx), (a,), backward)


def upsample2_nearest(a: Tensor) -> Tensor:
    if a.ndim != 3:
        raise ShapeError("upsample2_nearest", a.shape)

    def backward(g, inputs, ctx, needs):
        return (sum_pool2(g),)

    return record("upsample2_nearest", K.upsample2(a.data), (a,), backward)


def sum_pool2(a: Tensor) -> Tensor:
    _check_even("sum_pool2", a)

    def backward(g, inputs, ctx, needs):
        return (upsample2_nearest(g),)

    return record("sum_pool2", K.sum_pool2(a.data), (a,), backward)


def _phase_kernels(w: Tensor) -> Tensor:
    def backward(g, inputs, ctx, needs):
        return (_phase_kernels_adjoint(g),)

    return record("phase_kernels", K.phase_kernels(w.data), (w,), backward)


def _phase_kernels_adjoint(g: Tensor) -> Tensor:
    def backward(gg, inputs, ctx, needs):
        return (_phase_kernels(gg),)

    return record("phase_kernels_adjoint", K.phase_kernels_adjoint(g.data), (g,), backward)


def _phase_assemble(y: Tensor) -> Tensor:
    def backward(g, inputs, ctx, needs):
        return (_phase_split(g),)

    return record("phase_assemble", K.phase_assemble(y.data), (y,), backward)


def _phase_split(g: Tensor) -> Tensor:
    def backward(gg, inputs, ctx, needs):
        return (_phase_assemble(gg),)

    return record("phase_split", K.phase_split(g.data), (g,), backward)


def upsample2_conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """``conv2d(upsample2_nearest(x), w, 1, 1)`` evaluated at the input resolution.

    Each output parity is a 2x2 convolution of ``x`` with folded taps of
    ``w``, so the cost is that of a 2x2 conv on the small grid.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3) or x.shape[0] != w.shape[1]:
        raise ShapeError("upsample2_conv3x3", x.shape, w.shape)
    geom = K.ConvGeom(1, 1, x.shape[1], x.shape[2], 2, 2)
    return _phase_assemble(_conv(x, _phase_kernels(w), geom))


# classification head -------------------------------------------------------

def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over axis 0."""

    def backward(g, inputs, ctx, needs):
        s = softmax_channels(inputs[0])
        gs = mul(g, s)
        return (sub(gs, mul(s, expand_channels(sum_channels(gs), s.shape[0]))),)

    return record("softmax_channels", K.softmax(a.data, axis=0), (a,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[label]``.

    ``logits`` is ``[K, H, W]``; ``labels`` an integer array ``[H, W]``.
    """
    labels = np.asarray(labels)
    if logits.ndim < 2 or labels.shape != logits.shape[1:]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    k = logits.shape[0]
    if labels.size:
        lo, hi = int(labels.min()), int(labels.max())
        if lo < 0 or hi >= k:
            raise LabelRangeError("softmax_cross_entropy", lo, hi, k)
    if labels.dtype.kind not in "iub":
        if not np.array_equal(labels, np.round(labels)):
            raise LabelRangeError("softmax_cross_entropy", int(labels.min()), int(labels.max()), k)
        labels = labels.astype(np.int64)
    n = labels.size
    logp = K.log_softmax(logits.data, axis=0)
    picked = np.take_along_axis(logp, labels[None].astype(np.intp), axis=0)
    value = np.asarray(-picked.sum() / n)
    onehot = (np.arange(k).reshape(k, *([1] * labels.ndim)) == labels[None]).astype(np.float64)

    def backward(g, inputs, ctx, needs):
        diff = sub(softmax_channels(inputs[0]), Tensor._wrap(ctx))
        return (scale(mul(g, diff), 1.0 / n),)

    return record("softmax_cross_entropy", value, (logits,), backward, onehot)


# operator sugar
def _radd(self, other):
    return add(other, self)


def _rsub(self, other):
    return sub(other, self)


def _mul(self, other):
    if isinstance(other, (int, float)):
        return scale(self, other)
    return mul(self, other)


def _rmul(self, other):
    if isinstance(other, (int, float)):
        return scale(self, other)
    return mul(other, self)


Tensor.__add__ = add
Tensor.__radd__ = _radd
Tensor.__sub__ = sub
Tensor.__rsub__ = _rsub
Tensor.__mul__ = _mul
Tensor.__rmul__ = _rmul
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
