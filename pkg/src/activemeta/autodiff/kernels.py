"""Raw numpy kernels with no tape involvement.

All spatial kernels accept arbitrary leading dimensions, so the same code
serves single-sample tape ops ``[C, H, W]`` and batched inference
``[N, C, H, W]``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConvGeom(NamedTuple):
    stride: int
    padding: int
    in_h: int
    in_w: int
    kh: int
    kw: int

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.padding - self.kh) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.padding - self.kw) // self.stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width)


def im2col(x: np.ndarray, g: ConvGeom) -> np.ndarray:
    """``[..., C, H, W]`` -> ``[..., C*kh*kw, out_h*out_w]`` (row order c, i, j)."""
    xp = _pad(x, g.padding)
    win = sliding_window_view(xp, (g.kh, g.kw), axis=(-2, -1))
    s = g.stride
    win = win[..., : g.out_h * s : s, : g.out_w * s : s, :, :]
    # [..., C, Ho, Wo, kh, kw] -> [..., C, kh, kw, Ho, Wo]
    win = np.moveaxis(win, (-2, -1), (-4, -3))
    lead = x.shape[:-3]
    c = x.shape[-3]
    return win.reshape(*lead, c * g.kh * g.kw, g.out_h * g.out_w)


def col2im(cols: np.ndarray, g: ConvGeom, channels: int) -> np.ndarray:
    """Adjoint of :func:`im2col` (scatter-add back to ``[..., C, H, W]``)."""
    lead = cols.shape[:-2]
    ho, wo, s, p = g.out_h, g.out_w, g.stride, g.padding
    cols = cols.reshape(*lead, channels, g.kh, g.kw, ho, wo)
    out = np.zeros((*lead, channels, g.in_h + 2 * p, g.in_w + 2 * p))
    for i in range(g.kh):
        for j in range(g.kw):
            out[..., i : i + s * ho : s, j : j + s * wo : s] += cols[..., i, j, :, :]
    if p:
        out = out[..., p : p + g.in_h, p : p + g.in_w]
    return np.ascontiguousarray(out)


def _conv2d_shifted(x: np.ndarray, w: np.ndarray, g: ConvGeom) -> np.ndarray:
    """Stride-1 conv from contiguous slices of the flattened padded input.

    Output rows come out with the padded width; the extra columns are
    dropped at the end.
    """
    o, c = w.shape[:2]
    xp = _pad(x, g.padding)
    hp, wp = xp.shape[-2:]
    lead = x.shape[:-3]
    flat = xp.reshape(*lead, c, hp * wp)
    span = (g.out_h - 1) * wp + g.out_w
    cols = np.empty((*lead, c, g.kh * g.kw, g.out_h * wp))
    cols[..., span:] = 0.0
    for i in range(g.kh):
        for j in range(g.kw):
            off = i * wp + j
            cols[..., i * g.kw + j, :span] = flat[..., off:off + span]
    y = np.matmul(w.reshape(o, -1), cols.reshape(*lead, c * g.kh * g.kw, g.out_h * wp))
    return y.reshape(*lead, o, g.out_h, wp)[..., : g.out_w]


def conv2d(x: np.ndarray, w: np.ndarray, g: ConvGeom, cols: np.ndarray | None = None) -> np.ndarray:
    if cols is None:
        if g.stride == 1:
            return _conv2d_shifted(x, w, g)
        cols = im2col(x, g)
    o = w.shape[0]
    y = np.matmul(w.reshape(o, -1), cols)
    return y.reshape(*y.shape[:-1], g.out_h, g.out_w)


def conv2d_input_grad(gy: np.ndarray, w: np.ndarray, g: ConvGeom) -> np.ndarray:
    o, c = w.shape[:2]
    gy2 = gy.reshape(*gy.shape[:-3], o, g.out_h * g.out_w)
    cols = np.matmul(w.reshape(o, -1).T, gy2)
    return col2im(cols, g, c)


def conv2d_weight_grad(x: np.ndarray, gy: np.ndarray, g: ConvGeom,
                       cols: np.ndarray | None = None) -> np.ndarray:
    if cols is None:
        cols = im2col(x, g)
    o = gy.shape[-3]
    c = x.shape[-3]
    gw = gy.reshape(o, -1) @ cols.T
    return gw.reshape(o, c, g.kh, g.kw)


def bias_add(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x + b[:, None, None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _quads(x: np.ndarray):
    return x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2]


def max_pool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool; returns values and the argmax within each window.

    Window positions are numbered 0..3 in row-major order; ties resolve to
    the lowest position.
    """
    a, b, c, d = _quads(x)
    m = np.maximum(np.maximum(a, b), np.maximum(c, d))
    idx = np.where(a == m, 0, np.where(b == m, 1, np.where(c == m, 2, 3))).astype(np.int8)
    return m, idx


def max_pool2_values(x: np.ndarray) -> np.ndarray:
    a, b, c, d = _quads(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def unpool2(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Scatter pooled gradients back to the argmax positions."""
    *lead, h2, w2 = g.shape
    out = np.zeros((*lead, 2 * h2, 2 * w2))
    for k, view in enumerate(_quads(out)):
        view[...] = np.where(idx == k, g, 0.0)
    return out


def gather_pool2(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    a, b, c, d = _quads(x)
    return np.where(idx == 0, a, np.where(idx == 1, b, np.where(idx == 2, c, d)))


def upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def sum_pool2(x: np.ndarray) -> np.ndarray:
    *lead, h, w = x.shape
    return x.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


# Nearest 2x upsampling followed by a 3x3/pad-1 conv equals, per output
# parity (a, b), a 2x2 conv on the low-resolution input.  Row taps of the
# 3x3 kernel fold onto low-res offsets as PHASE_FOLD[a] @ k (and likewise for
# columns); the four parities are stacked along the output-channel axis.
PHASE_FOLD = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]],
                       [[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])


def _fold(w: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply PHASE_FOLD[0] and PHASE_FOLD[1] along a length-3 axis."""
    k0, k1, k2 = (np.take(w, i, axis=axis) for i in range(3))
    return np.stack([k0, k1 + k2], axis=axis), np.stack([k0 + k1, k2], axis=axis)


def _unfold(g0: np.ndarray, g1: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of :func:`_fold` (transpose of PHASE_FOLD, summed over parity)."""
    a0, a1 = (np.take(g0, i, axis=axis) for i in range(2))
    b0, b1 = (np.take(g1, i, axis=axis) for i in range(2))
    return np.stack([a0 + b0, a1 + b0, a1 + b1], axis=axis)


def phase_kernels(w: np.ndarray) -> np.ndarray:
    """``[O, C, 3, 3] -> [4*O, C, 2, 2]``, parity-major (a, b) blocks of O."""
    blocks = []
    for rows in _fold(w, -2):
        blocks.extend(_fold(rows, -1))
    return np.concatenate(blocks, axis=0)


def phase_kernels_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`phase_kernels`: ``[4*O, C, 2, 2] -> [O, C, 3, 3]``."""
    g00, g01, g10, g11 = np.split(g, 4, axis=0)
    return _unfold(_unfold(g00, g01, -1), _unfold(g10, g11, -1), -2)


def phase_assemble(y: np.ndarray) -> np.ndarray:
    """``[..., 4*O, n+1, m+1] -> [..., O, 2n, 2m]`` interleaving the parity blocks."""
    *lead, o4, n1, m1 = y.shape
    o, n, m = o4 // 4, n1 - 1, m1 - 1
    y = y.reshape(*lead, 2, 2, o, n1, m1)
    out = np.empty((*lead, o, 2 * n, 2 * m))
    for a in range(2):
        for b in range(2):
            out[..., a::2, b::2] = y[..., a, b, :, a:a + n, b:b + m]
    return out


def phase_split(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`phase_assemble` (zeros where no output was read)."""
    *lead, o, n2, m2 = g.shape
    n, m = n2 // 2, m2 // 2
    out = np.zeros((*lead, 2, 2, o, n + 1, m + 1))
    for a in range(2):
        for b in range(2):
            out[..., a, b, :, a:a + n, b:b + m] = g[..., a::2, b::2]
    return out.reshape(*lead, 4 * o, n + 1, m + 1)


def upsample2_conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Equivalent to ``conv2d(upsample2(x), w)`` with stride 1, padding 1."""
    geom = ConvGeom(1, 1, x.shape[-2], x.shape[-1], 2, 2)
    return phase_assemble(conv2d(x, phase_kernels(w), geom))


def softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
