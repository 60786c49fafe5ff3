"""Differentiable network operations: 3-D convolution, ReLU, channel
concatenation, 2x2x2 max pooling with index bookkeeping, unpooling, and
softmax cross-entropy.

Convolutions are expressed as matrix products so the heavy lifting lands in
BLAS: each of the 27 kernel taps becomes one GEMM between the tap's
(out, in) matrix and a shifted contiguous slice of the zero-padded,
channel-flattened volume, accumulated into a padded buffer whose interior
is the result.  No column matrix is ever materialized, so the transient
memory stays at a couple of output-sized buffers.  The gradient with
respect to the input is itself a convolution (channel-swapped, spatially
flipped kernel), so it reuses the same core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelError, ShapeError
from .tensor import Shape5, Tensor, record_op


@dataclass
class ConvParams:
    """Learnable weight (out_ch, in_ch, k, k, k) and bias (1, out_ch, 1, 1, 1)."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        w, b = self.weight.shape, self.bias.shape
        if w[2] != w[3] or w[3] != w[4] or w[2] not in (1, 3):
            raise ShapeError(f"kernel must be cubic with size 1 or 3, got {w[2:]}")
        if b != (1, w[0], 1, 1, 1):
            raise ShapeError(f"bias shape {b} does not match {w[0]} output channels")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def _pad_spatial(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))


def _matmul_channels(w2: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply an (out, in) matrix across channels of (b, in, X, Y, Z)."""
    b, _, sx, sy, sz = x.shape
    flat = x.reshape(b, x.shape[1], sx * sy * sz)
    return np.matmul(w2, flat).reshape(b, w2.shape[0], sx, sy, sz)


def _tap_offsets(sy: int, sz: int):
    """Flat index shift in the padded volume for each kernel offset."""
    x_stride = (sy + 2) * (sz + 2)
    y_stride = sz + 2
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                yield dx + 1, dy + 1, dz + 1, dx * x_stride + dy * y_stride + dz


def _conv3_core(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlate zero-padded x with a 3-cubed kernel, tap by tap."""
    b, ci, sx, sy, sz = x.shape
    co = w.shape[0]
    padded = _pad_spatial(x)
    n = (sx + 2) * (sy + 2) * (sz + 2)
    # Contiguous per-tap matrices; strided views would knock the GEMMs off
    # the BLAS fast path.
    taps = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    out = np.empty((b, co, sx, sy, sz), dtype=x.dtype)
    acc = np.empty((co, n), dtype=x.dtype)
    tmp = np.empty((co, n), dtype=x.dtype)
    for bi in range(b):
        flat = padded[bi].reshape(ci, n)
        acc[:] = 0.0
        for kx, ky, kz, rel in _tap_offsets(sy, sz):
            lo = max(0, -rel)
            hi = n - max(0, rel)
            np.matmul(taps[kx, ky, kz], flat[:, lo + rel:hi + rel],
                      out=tmp[:, :hi - lo])
            acc[:, lo:hi] += tmp[:, :hi - lo]
        out[bi] = acc.reshape(co, sx + 2, sy + 2, sz + 2)[:, 1:-1, 1:-1, 1:-1]
    return out


def _conv3_weight_grad(x: np.ndarray, g: np.ndarray, w_shape: tuple[int, ...]) -> np.ndarray:
    """d(out)/d(w), one GEMM per tap; g's zero border drops out-of-range terms."""
    b, ci, sx, sy, sz = x.shape
    padded = _pad_spatial(x)
    gpad = _pad_spatial(g)
    n = (sx + 2) * (sy + 2) * (sz + 2)
    grad_w = np.zeros(w_shape, dtype=x.dtype)
    for bi in range(b):
        flat = padded[bi].reshape(ci, n)
        gflat = gpad[bi].reshape(g.shape[1], n)
        for kx, ky, kz, rel in _tap_offsets(sy, sz):
            lo = max(0, -rel)
            hi = n - max(0, rel)
            grad_w[:, :, kx, ky, kz] += (flat[:, lo + rel:hi + rel]
                                         @ gflat[:, lo:hi].T).T
    return grad_w


def _flip_swap(w: np.ndarray) -> np.ndarray:
    # Input gradient of a cross-correlation convolves with the spatially
    # flipped kernel, with in/out channel roles exchanged.
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])


def _conv3d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if w.shape[2] == 1:
        out = _matmul_channels(w[:, :, 0, 0, 0], x)
    else:
        out = _conv3_core(x, w)
    return out + bias


def conv3d(x: Tensor, params: ConvParams) -> Tensor:
    """Zero-padded cross-correlation; output spatial extents equal input's."""
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"conv3d expects {params.in_channels} input channels, got {x.shape[1]}")
    w, bias = params.weight, params.bias
    out_data = _conv3d_forward(x.data, w.data, bias.data)

    def _backward(g: np.ndarray):
        k = params.kernel_size
        out_ch = g.shape[1]
        grad_b = None
        if bias.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3, 4)).reshape(1, out_ch, 1, 1, 1)
        grad_w = None
        grad_x = None
        if k == 1:
            if w.requires_grad:
                grad_w = np.tensordot(g, x.data, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                grad_w = grad_w.reshape(w.shape)
            if x.requires_grad:
                grad_x = _matmul_channels(w.data[:, :, 0, 0, 0].T, g)
        else:
            if w.requires_grad:
                grad_w = _conv3_weight_grad(x.data, g, w.data.shape)
            if x.requires_grad:
                grad_x = _conv3_core(g, _flip_swap(w.data))
        return grad_x, grad_w, grad_b

    return record_op("conv3d", (x, w, bias), out_data, _backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the gradient passes only where the input was positive."""
    positive = x.data > 0

    def _backward(g: np.ndarray):
        return (np.where(positive, g, 0),)

    return record_op("relu", (x,), np.where(positive, x.data, 0), _backward)


def concat_channels(parts: list[Tensor] | tuple[Tensor, ...]) -> Tensor:
    """Concatenate along the channel axis; other extents must agree."""
    if not parts:
        raise ShapeError("concat_channels needs at least one input")
    base = parts[0].shape
    for t in parts[1:]:
        s = t.shape
        if (s[0],) + s[2:] != (base[0],) + base[2:]:
            raise ShapeError(f"concat_channels extents disagree: {base} vs {s}")
    widths = [t.shape[1] for t in parts]
    edges = np.cumsum([0] + widths)

    def _backward(g: np.ndarray):
        return tuple(g[:, edges[i]:edges[i + 1]] if t.requires_grad else None
                     for i, t in enumerate(parts))

    out_data = np.concatenate([t.data for t in parts], axis=1)
    return record_op("concat", tuple(parts), out_data, _backward)


@dataclass
class PoolContext:
    """Where each pooled maximum came from: flat spatial indices per (b, c)."""

    input_shape: Shape5
    indices: np.ndarray  # int64, (b, c, x//2, y//2, z//2)


def maxpool3d(x: Tensor) -> tuple[Tensor, PoolContext]:
    """2x2x2 max pooling with stride 2.

    Odd trailing extents are cropped.  Ties go to the lowest flat index of
    the input grid.  Returns the pooled tensor and a context for unpooling.
    """
    b, c, sx, sy, sz = x.shape
    ox, oy, oz = sx // 2, sy // 2, sz // 2
    if ox == 0 or oy == 0 or oz == 0:
        raise ShapeError(f"maxpool3d needs spatial extents >= 2, got {(sx, sy, sz)}")
    cropped = x.data[:, :, :ox * 2, :oy * 2, :oz * 2]
    blocks = cropped.reshape(b, c, ox, 2, oy, 2, oz, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(b, c, ox, oy, oz, 8)
    local = np.argmax(blocks, axis=-1)  # first max wins
    out_data = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]

    # Decompose the within-block index and rebuild flat input coordinates.
    lx, rem = np.divmod(local, 4)
    ly, lz = np.divmod(rem, 2)
    gx = np.arange(ox).reshape(1, 1, ox, 1, 1) * 2 + lx
    gy = np.arange(oy).reshape(1, 1, 1, oy, 1) * 2 + ly
    gz = np.arange(oz).reshape(1, 1, 1, 1, oz) * 2 + lz
    flat = (gx * sy + gy) * sz + gz
    ctx = PoolContext(input_shape=(b, c, sx, sy, sz), indices=flat.astype(np.int64))

    def _backward(g: np.ndarray):
        grad_flat = np.zeros((b, c, sx * sy * sz), dtype=g.dtype)
        np.put_along_axis(grad_flat, ctx.indices.reshape(b, c, -1), g.reshape(b, c, -1), axis=2)
        return (grad_flat.reshape(b, c, sx, sy, sz),)

    return record_op("maxpool3d", (x,), out_data, _backward), ctx


def unpool3d(x: Tensor, ctx: PoolContext) -> Tensor:
    """Scatter pooled values back to the positions recorded by maxpool3d."""
    b, c, sx, sy, sz = ctx.input_shape
    if x.shape != ctx.indices.shape:
        raise ShapeError(f"unpool3d input {x.shape} does not match pooled shape {ctx.indices.shape}")
    flat = np.zeros((b, c, sx * sy * sz), dtype=x.dtype)
    np.put_along_axis(flat, ctx.indices.reshape(b, c, -1), x.data.reshape(b, c, -1), axis=2)
    out_data = flat.reshape(b, c, sx, sy, sz)

    def _backward(g: np.ndarray):
        picked = np.take_along_axis(g.reshape(b, c, -1), ctx.indices.reshape(b, c, -1), axis=2)
        return (picked.reshape(x.shape),)

    return record_op("unpool3d", (x,), out_data, _backward)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean voxelwise cross-entropy between 2-class logits and a label grid.

    ``logits`` is (1, 2, x, y, z); ``target`` is an integer (x, y, z) array of
    0/1 labels.  The softmax is folded into the loss via a max-shifted
    log-sum-exp, which keeps every per-voxel term non-negative.
    """
    if logits.shape[0] != 1 or logits.shape[1] != 2:
        raise ShapeError(f"softmax_cross_entropy expects (1, 2, x, y, z) logits, got {logits.shape}")
    labels = np.asarray(target)
    if labels.shape != logits.shape[2:]:
        raise ShapeError(f"target {labels.shape} does not match logits grid {logits.shape[2:]}")
    if not np.isin(labels, (0, 1)).all():
        raise LabelError("target labels must be 0 or 1")
    labels = labels.astype(np.int64)

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    sum_exp = np.exp(shifted).sum(axis=1, keepdims=True)
    picked = np.take_along_axis(shifted, labels[None, None], axis=1)
    voxel_losses = np.log(sum_exp) - picked
    n_vox = voxel_losses.size
    out_data = np.mean(voxel_losses, dtype=z.dtype).reshape((1,) * 5)

    def _backward(g: np.ndarray):
        softmax = np.exp(shifted) / sum_exp
        one_hot = np.zeros_like(softmax)
        np.put_along_axis(one_hot, labels[None, None], 1, axis=1)
        scale = g.reshape(()) / n_vox
        return ((softmax - one_hot) * scale, )

    return record_op("softmax_cross_entropy", (logits,), out_data, _backward)
