"""Differentiable layers used by the networks: convolutions, pooling,
normalization, activations, interpolation and vector similarity.

Spatial operators accept either an unbatched ``(C, *spatial)`` tensor or a
batched ``(N, C, *spatial)`` one; the batch axis is inferred from ``dims``.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import Tensor, make_result


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an operator."""


def _tuple(v, dims: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * dims
    v = tuple(int(i) for i in v)
    if len(v) != dims:
        raise ShapeError(f"expected {dims} values, got {v}")
    return v


def _batched(x: np.ndarray, dims: int, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == dims + 1:
        return x[None], True
    if x.ndim == dims + 2:
        return x, False
    raise ShapeError(f"{what}: expected a (C, *{dims}d) or (N, C, *{dims}d) tensor, got shape {x.shape}")


def _offsets(k: tuple[int, ...]):
    return itertools.product(*(range(n) for n in k))


def _window(offset, stride, out):
    return tuple(slice(t, t + s * (o - 1) + 1, s) for t, s, o in zip(offset, stride, out))


def _gather_conv(xp: np.ndarray, w: np.ndarray, stride, out_sp) -> np.ndarray:
    """Cross-correlate padded ``xp`` (N, Cin, ...) with ``w`` (Cout, Cin, *k)."""
    n, cin = xp.shape[:2]
    cout = w.shape[0]
    size = int(np.prod(out_sp))
    acc = np.zeros((n, cout, size), dtype=np.result_type(xp, w))
    for off in _offsets(w.shape[2:]):
        xs = xp[(slice(None), slice(None)) + _window(off, stride, out_sp)].reshape(n, cin, size)
        acc += np.matmul(w[(slice(None), slice(None)) + off], xs)
    return acc.reshape((n, cout) + tuple(out_sp))


def _scatter_conv(g: np.ndarray, w: np.ndarray, stride, full_sp) -> np.ndarray:
    """Adjoint of :func:`_gather_conv` w.r.t. its input: returns (N, Cin, *full_sp)."""
    n, cout = g.shape[:2]
    out_sp = g.shape[2:]
    cin = w.shape[1]
    g2 = g.reshape(n, cout, -1)
    full = np.zeros((n, cin) + tuple(full_sp), dtype=np.result_type(g, w))
    for off in _offsets(w.shape[2:]):
        contrib = np.matmul(w[(slice(None), slice(None)) + off].T, g2)
        full[(slice(None), slice(None)) + _window(off, stride, out_sp)] += contrib.reshape((n, cin) + tuple(out_sp))
    return full


def _kernel_grad(xp: np.ndarray, g: np.ndarray, kshape, stride) -> np.ndarray:
    """d/dw of :func:`_gather_conv`; returns (Cout, Cin, *k)."""
    n, cin = xp.shape[:2]
    cout = g.shape[1]
    out_sp = g.shape[2:]
    g2 = g.reshape(n, cout, -1)
    gw = np.zeros((cout, cin) + tuple(kshape), dtype=np.result_type(xp, g))
    for off in _offsets(kshape):
        xs = xp[(slice(None), slice(None)) + _window(off, stride, out_sp)].reshape(n, cin, -1)
        gw[(slice(None), slice(None)) + off] = np.einsum("nos,ncs->oc", g2, xs, optimize=True)
    return gw


class _FlatIm2col:
    """Stride-1 correlation on the flattened padded grid.

    Every kernel offset becomes a contiguous shift of the flattened input, so
    the column matrix is built from 1-D slices and a single GEMM does the
    contraction. Outputs are computed for every padded-grid position and the
    invalid tail of each row is cropped afterwards.
    """

    def __init__(self, xp: np.ndarray, ksp):
        self.n, self.c = xp.shape[:2]
        self.padded = xp.shape[2:]
        self.ksp = tuple(ksp)
        self.out_sp = tuple(p - k + 1 for p, k in zip(self.padded, self.ksp))
        self.flat = int(np.prod(self.padded))
        strides = np.cumprod((1,) + self.padded[::-1])[:-1][::-1]
        self.shifts = [int(np.dot(off, strides)) for off in _offsets(self.ksp)]
        self.length = self.flat - self.shifts[-1]
        xf = xp.reshape(self.n, self.c, self.flat)
        cols = np.empty((len(self.shifts), self.c, self.n, self.length), dtype=xp.dtype)
        for t, sh in enumerate(self.shifts):
            cols[t] = xf[:, :, sh : sh + self.length].transpose(1, 0, 2)
        self.cols = cols.reshape(-1, self.n * self.length)

    def _wmat(self, w):
        return w.reshape(w.shape[0], w.shape[1], -1).transpose(0, 2, 1).reshape(w.shape[0], -1)

    def _to_grid(self, rows: np.ndarray) -> np.ndarray:
        # (O, N*L) padded-grid rows -> (N, O, *out_sp)
        o = rows.shape[0]
        full = np.zeros((o, self.n, self.flat), dtype=rows.dtype)
        full[:, :, : self.length] = rows.reshape(o, self.n, self.length)
        full = full.reshape((o, self.n) + self.padded)[(slice(None), slice(None)) + tuple(slice(0, m) for m in self.out_sp)]
        return np.ascontiguousarray(full.transpose((1, 0) + tuple(range(2, full.ndim))))

    def _from_grid(self, g: np.ndarray) -> np.ndarray:
        o = g.shape[1]
        full = np.zeros((o, self.n) + self.padded, dtype=g.dtype)
        full[(slice(None), slice(None)) + tuple(slice(0, m) for m in self.out_sp)] = g.transpose(
            (1, 0) + tuple(range(2, g.ndim))
        )
        return full.reshape(o, self.n, self.flat)[:, :, : self.length].reshape(o, -1)

    def forward(self, w: np.ndarray) -> np.ndarray:
        return self._to_grid(self._wmat(w) @ self.cols)

    def input_grad(self, g: np.ndarray, w: np.ndarray) -> np.ndarray:
        gq = self._from_grid(g)
        gcols = (self._wmat(w).T @ gq).reshape(len(self.shifts), self.c, self.n, self.length)
        gx = np.zeros((self.c, self.n, self.flat), dtype=gq.dtype)
        for t, sh in enumerate(self.shifts):
            gx[:, :, sh : sh + self.length] += gcols[t]
        return gx.transpose(1, 0, 2).reshape((self.n, self.c) + self.padded)

    def kernel_grad(self, g: np.ndarray) -> np.ndarray:
        gq = self._from_grid(g)
        gw = (gq @ self.cols.T).reshape(gq.shape[0], len(self.shifts), self.c)
        return gw.transpose(0, 2, 1).reshape((gq.shape[0], self.c) + self.ksp)


def conv(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    dims: int = 2,
) -> Tensor:
    """N-d cross-correlation (no kernel flip) with symmetric zero padding."""
    xb, squeeze = _batched(x.data, dims, "conv")
    if kernel.ndim != dims + 2:
        raise ShapeError(f"conv: kernel must be (Cout, Cin, *k) with {dims} spatial axes, got {kernel.shape}")
    if kernel.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv: input has {xb.shape[1]} channels but kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv: bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
    stride, padding = _tuple(stride, dims), _tuple(padding, dims)
    ksp = kernel.shape[2:]
    padded = tuple(n + 2 * p for n, p in zip(xb.shape[2:], padding))
    if any(k > n for k, n in zip(ksp, padded)):
        raise ShapeError(f"conv: kernel {ksp} larger than padded input {padded}")
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(padded, ksp, stride))
    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(xb, pad_width) if any(padding) else xb
    fast = _FlatIm2col(xp, ksp) if all(s == 1 for s in stride) else None
    out = fast.forward(kernel.data) if fast else _gather_conv(xp, kernel.data, stride, out_sp)
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * dims)
    inner = tuple(slice(p, p + n) for p, n in zip(padding, xb.shape[2:]))

    def bw(g):
        gb = g[None] if squeeze else g
        gx = gw = gbias = None
        if x.requires_grad:
            if fast:
                full = fast.input_grad(gb, kernel.data)
            else:
                full = _scatter_conv(gb, kernel.data, stride, padded)
            gx = full[(slice(None), slice(None)) + inner]
            gx = gx[0] if squeeze else gx
        if kernel.requires_grad:
            gw = fast.kernel_grad(gb) if fast else _kernel_grad(xp, gb, ksp, stride)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0,) + tuple(range(2, gb.ndim)))
        return gx, gw, gbias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out[0] if squeeze else out, parents, bw, f"conv{dims}d")


def transposed_conv(
    y: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride=2,
    dims: int = 2,
) -> Tensor:
    """Adjoint of unpadded :func:`conv` with the same ``kernel`` and ``stride``.

    ``kernel`` has conv layout ``(C_y, C_out, *k)``: the conv it transposes maps
    ``C_out`` channels to ``C_y``. Output extent is ``(in - 1) * stride + k``.
    """
    yb, squeeze = _batched(y.data, dims, "transposed_conv")
    if kernel.ndim != dims + 2 or kernel.shape[0] != yb.shape[1]:
        raise ShapeError(f"transposed_conv: kernel {kernel.shape} incompatible with input {y.shape}")
    stride = _tuple(stride, dims)
    if any(s < 1 for s in stride):
        raise ShapeError(f"transposed_conv: stride must be >= 1, got {stride}")
    ksp = kernel.shape[2:]
    full_sp = tuple((n - 1) * s + k for n, s, k in zip(yb.shape[2:], stride, ksp))
    out = _scatter_conv(yb, kernel.data, stride, full_sp)
    if bias is not None:
        if bias.shape != (kernel.shape[1],):
            raise ShapeError(f"transposed_conv: bias shape {bias.shape} does not match {kernel.shape[1]} channels")
        out += bias.data.reshape((1, -1) + (1,) * dims)

    def bw(g):
        gb = g[None] if squeeze else g
        gy = gw = gbias = None
        if y.requires_grad:
            gy = _gather_conv(gb, kernel.data, stride, yb.shape[2:])
            gy = gy[0] if squeeze else gy
        if kernel.requires_grad:
            gw = _kernel_grad(gb, yb, ksp, stride)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0,) + tuple(range(2, gb.ndim)))
        return gy, gw, gbias

    parents = (y, kernel) if bias is None else (y, kernel, bias)
    return make_result(out[0] if squeeze else out, parents, bw, f"tconv{dims}d")


def max_pool(x: Tensor, window=2, dims: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first
    element of the window in row-major order."""
    xb, squeeze = _batched(x.data, dims, "max_pool")
    window = _tuple(window, dims)
    sp = xb.shape[2:]
    if any(n % w for n, w in zip(sp, window)):
        raise ShapeError(f"max_pool: extents {sp} not divisible by window {window}")
    n, c = xb.shape[:2]
    coarse = tuple(s // w for s, w in zip(sp, window))
    split = (n, c) + tuple(v for pair in zip(coarse, window) for v in pair)
    perm = (0, 1) + tuple(range(2, 2 + 2 * dims, 2)) + tuple(range(3, 3 + 2 * dims, 2))
    blocks = xb.reshape(split).transpose(perm).reshape((n, c) + coarse + (-1,))
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    inverse = tuple(np.argsort(perm))

    def bw(g):
        gb = g[None] if squeeze else g
        onehot = np.zeros_like(blocks)
        np.put_along_axis(onehot, idx[..., None], gb[..., None], axis=-1)
        gx = onehot.reshape((n, c) + coarse + window).transpose(inverse).reshape(xb.shape)
        return (gx[0] if squeeze else gx,)

    return make_result(out[0] if squeeze else out, (x,), bw, f"maxpool{dims}d")


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5, dims: int | None = None) -> Tensor:
    """Per-instance, per-channel standardization followed by a channel affine map."""
    dims = x.ndim - 1 if dims is None else dims
    xb, squeeze = _batched(x.data, dims, "instance_norm")
    c = xb.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"instance_norm: gain/shift must have shape ({c},)")
    axes = tuple(range(2, xb.ndim))
    if int(np.prod(xb.shape[2:])) < 2:
        raise ShapeError("instance_norm: need at least 2 spatial elements per channel")
    mu = xb.mean(axis=axes, keepdims=True)
    centered = xb - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    bshape = (1, c) + (1,) * dims
    out = xhat * gain.data.reshape(bshape) + shift.data.reshape(bshape)

    def bw(g):
        gb = g[None] if squeeze else g
        gx = gg = gs = None
        if x.requires_grad:
            dxhat = gb * gain.data.reshape(bshape)
            gx = inv * (
                dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
            gx = gx[0] if squeeze else gx
        red = (0,) + axes
        if gain.requires_grad:
            gg = (gb * xhat).sum(axis=red)
        if shift.requires_grad:
            gs = gb.sum(axis=red)
        return gx, gg, gs

    return make_result(out[0] if squeeze else out, (x, gain, shift), bw, "instance_norm")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def interp_matrix(src: np.ndarray, n_in: int, dtype=np.float64) -> np.ndarray:
    """Row i linearly interpolates the input grid at fractional index ``src[i]``,
    clamped to ``[0, n_in - 1]``."""
    src = np.clip(np.asarray(src, dtype=np.float64), 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((src.size, n_in), dtype=np.float64)
    rows = np.arange(src.size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def upsample_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Align-corners-false linear upsampling matrix of shape (n_in*factor, n_in)."""
    out = np.arange(n_in * factor)
    return interp_matrix((out + 0.5) / factor - 0.5, n_in, dtype)


def apply_along(arr: np.ndarray, mats, axes) -> np.ndarray:
    for m, ax in zip(mats, axes):
        arr = np.moveaxis(np.tensordot(m, arr, axes=([1], [ax])), 0, ax)
    return arr


def linear_upsample(x: Tensor, factor: int = 2, dims: int = 2) -> Tensor:
    """Separable bi/trilinear interpolation, align-corners-false convention."""
    if factor < 2:
        raise ValueError(f"upsampling factor must be >= 2, got {factor}")
    xb, squeeze = _batched(x.data, dims, "linear_upsample")
    axes = tuple(range(2, 2 + dims))
    mats = [upsample_matrix(xb.shape[a], factor, x.dtype) for a in axes]
    out = apply_along(xb, mats, axes)

    def bw(g):
        gb = g[None] if squeeze else g
        gx = apply_along(gb, [m.T for m in mats], axes)
        return (gx[0] if squeeze else gx,)

    return make_result(out[0] if squeeze else out, (x,), bw, f"upsample{dims}d")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """``a.b / (max(|a|, eps) * max(|b|, eps))`` along ``axis``."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    da, db = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = dot / (da * db)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = b.data / (da * db) - np.where(na > eps, cos * a.data / np.maximum(na, eps) ** 2, 0.0)
        gb = a.data / (da * db) - np.where(nb > eps, cos * b.data / np.maximum(nb, eps) ** 2, 0.0)
        return g * ga, g * gb

    return make_result(np.squeeze(cos, axis), (a, b), bw, "cosine_similarity")


def l2_normalize(x: Tensor, axis: int = 0, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit length."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - y * proj) / denom, g / denom),)

    return make_result(y, (x,), bw, "l2_normalize")
