"""Spatial operations on batched feature maps: convolution, transposed
convolution, bilinear warping and bilinear resizing.

All operations take and return ``Tensor`` values in batch x channels x
height x width layout and are differentiable. Convolution forward uses
an im2col + matmul path; the transposed convolution is the exact adjoint
of ``conv2d`` (it runs the same col2im scatter the convolution's input
gradient uses), so the inner-product identity

    <conv2d(a, w), b> == <a, conv2d_transposed(b, w)>

holds to rounding error.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, _accumulate, _record, as_tensor, concat


def _check_4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (B,C,H,W), got shape {t.shape}")


# -- im2col machinery ---------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold padded ``x`` (B,C,H,W) into columns (B, C*k*k, H_out*W_out)."""
    b, c, h, w = x.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, k, k, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[
                :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
            ]
    return cols.reshape(b, c * k * k, h_out * w_out)


def _col2im(
    cols: np.ndarray, spatial: tuple[int, int], c: int, k: int, stride: int, padding: int
) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto a (B,C,H,W) grid."""
    h, w = spatial
    b = cols.shape[0]
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    cols = cols.reshape(b, c, k, k, h_out, w_out)
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols[
                :, :, i, j
            ]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"kernel {k} with stride {stride}, padding {padding} does not fit "
            f"a {h}x{w} input"
        )
    return h_out, w_out


# -- convolution ---------------------------------------------------------


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation of ``x`` (B,C_in,H,W) with ``weight`` (C_out,C_in,k,k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_4d("conv2d input", x)
    _check_4d("conv2d weight", weight)
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    b, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels (axis 1), "
            f"weight expects {c_in} (axis 1)"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    h_out, w_out = _conv_geometry(h, w, k, stride, padding)

    cols = _im2col(x.data, k, stride, padding)
    w2d = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2d[None], cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = np.ascontiguousarray(out.reshape(b, c_out, h_out, w_out))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if not _record(inputs):
        return Tensor._from_op(out, (), None)

    def bwd(g: np.ndarray) -> None:
        g2d = g.reshape(b, c_out, h_out * w_out)
        if x.requires_grad:
            gcols = np.matmul(w2d.T[None], g2d)
            _accumulate(x, _col2im(gcols, (h, w), c_in, k, stride, padding))
        if weight.requires_grad:
            gw = np.matmul(g2d, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out, inputs, bwd)


def conv2d_transposed(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of ``conv2d``: ``x`` (B,C_in,H,W) with ``weight`` (C_in,C_out,k,k).

    Output spatial size is ``(H-1)*stride - 2*padding + k + output_padding``;
    ``output_padding`` resolves the size ambiguity a strided forward
    convolution leaves behind and must stay below ``stride``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_4d("conv2d_transposed input", x)
    _check_4d("conv2d_transposed weight", weight)
    if stride < 1:
        raise ShapeError(f"conv2d_transposed stride must be >= 1, got {stride}")
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError(
            f"output_padding must be in [0, stride), got {output_padding} with stride {stride}"
        )
    c_in, c_out, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d_transposed kernel must be square, got {k}x{k2}")
    b, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d_transposed channel mismatch: input has {c} channels (axis 1), "
            f"weight expects {c_in} (axis 1)"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d_transposed bias must have shape ({c_out},), got {bias.shape}")
    h_out = (h - 1) * stride - 2 * padding + k + output_padding
    w_out = (w - 1) * stride - 2 * padding + k + output_padding
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d_transposed produces empty output from {h}x{w} input")

    w2d = weight.data.reshape(c_in, c_out * k * k)
    x2d = x.data.reshape(b, c_in, h * w)
    cols = np.matmul(w2d.T[None], x2d)
    out = _col2im(cols, (h_out, w_out), c_out, k, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if not _record(inputs):
        return Tensor._from_op(out, (), None)

    def bwd(g: np.ndarray) -> None:
        gcols = _im2col(g, k, stride, padding)
        if x.requires_grad:
            gx = np.matmul(w2d[None], gcols)
            _accumulate(x, np.ascontiguousarray(gx.reshape(x.shape)))
        if weight.requires_grad:
            gw = np.matmul(x2d, gcols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out, inputs, bwd)


# -- bilinear sampling ----------------------------------------------------


def _corner_setup(s: np.ndarray, limit: int):
    """Clamp source coordinates to the border and split into corner index + weight."""
    sc = np.clip(s, 0.0, limit - 1.0)
    i0 = np.minimum(np.floor(sc), limit - 1.0).astype(np.int64)
    i1 = np.minimum(i0 + 1, limit - 1)
    frac = sc - i0
    return i0, i1, frac


def _gather(xd: np.ndarray, iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
    """Gather (B,C,H,W) values at per-batch integer grids iy, ix of shape (B,h,w)."""
    b, c, h, w = xd.shape
    flat = xd.reshape(b, c, h * w)
    idx = (iy * w + ix).reshape(b, 1, -1)
    out = np.take_along_axis(flat, np.broadcast_to(idx, (b, c, idx.shape[2])), axis=2)
    return out.reshape(b, c, *iy.shape[1:])


def _scatter_corners(shape, corners) -> np.ndarray:
    """Accumulate weighted gradients onto a (B,C,H,W) grid via one bincount."""
    b, c, h, w = shape
    base = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    idx_all = []
    val_all = []
    for iy, ix, val in corners:
        idx = base + (iy * w + ix)[:, None]
        idx_all.append(np.broadcast_to(idx, val.shape).ravel())
        val_all.append(val.ravel())
    flat = np.bincount(
        np.concatenate(idx_all), weights=np.concatenate(val_all), minlength=b * c * h * w
    )
    return flat.reshape(b, c, h, w)


def grid_sample_bilinear(x: Tensor, flow: Tensor) -> Tensor:
    """Sample ``x`` at ``p + flow(p)`` with bilinear interpolation.

    ``flow`` is (B,2,H,W) with channel 0 the x-displacement and channel 1
    the y-displacement, in pixels. Source coordinates outside the image
    are clamped to the border. Differentiable in both ``x`` and ``flow``
    (the flow gradient is zero wherever the source coordinate clamped).
    """
    x, flow = as_tensor(x), as_tensor(flow)
    _check_4d("grid_sample input", x)
    _check_4d("grid_sample flow", flow)
    if flow.shape[1] != 2:
        raise ShapeError(f"flow must have 2 channels (axis 1), got {flow.shape[1]}")
    b, c, h, w = x.shape
    if flow.shape[0] != b or flow.shape[2:] != (h, w):
        raise ShapeError(
            f"flow spatial dims {flow.shape} do not match input {x.shape}"
        )
    if not np.isfinite(flow.data).all():
        raise NonFiniteError("grid_sample flow contains non-finite displacements")

    fd = flow.data
    sx = np.arange(w, dtype=np.float64)[None, None, :] + fd[:, 0]
    sy = np.arange(h, dtype=np.float64)[:, None][None] + fd[:, 1]
    x0, x1, fx = _corner_setup(sx, w)
    y0, y1, fy = _corner_setup(sy, h)

    v00 = _gather(x.data, y0, x0)
    v01 = _gather(x.data, y0, x1)
    v10 = _gather(x.data, y1, x0)
    v11 = _gather(x.data, y1, x1)
    wfx = fx[:, None]
    wfy = fy[:, None]
    out = ((1 - wfy) * ((1 - wfx) * v00 + wfx * v01)) + (wfy * ((1 - wfx) * v10 + wfx * v11))
    out = np.ascontiguousarray(out)

    if not _record((x, flow)):
        return Tensor._from_op(out, (), None)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            grad_x = _scatter_corners(
                x.shape,
                [
                    (y0, x0, (1 - wfy) * (1 - wfx) * g),
                    (y0, x1, (1 - wfy) * wfx * g),
                    (y1, x0, wfy * (1 - wfx) * g),
                    (y1, x1, wfy * wfx * g),
                ],
            )
            _accumulate(x, grad_x)
        if flow.requires_grad:
            dsx = (1 - wfy) * (v01 - v00) + wfy * (v11 - v10)
            dsy = (1 - wfx) * (v10 - v00) + wfx * (v11 - v01)
            open_x = ((sx >= 0.0) & (sx <= w - 1.0))[:, None]
            open_y = ((sy >= 0.0) & (sy <= h - 1.0))[:, None]
            gx = (g * dsx).sum(axis=1, keepdims=True) * open_x
            gy = (g * dsy).sum(axis=1, keepdims=True) * open_y
            _accumulate(flow, np.concatenate([gx, gy], axis=1))

    return Tensor._from_op(out, (x, flow), bwd)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling to ``out_h`` x ``out_w``.

    Uses the half-pixel-centres convention (align_corners=false): output
    pixel ``j`` samples source coordinate ``(j + 0.5) * W_in / W_out - 0.5``,
    clamped to the border, so constant inputs stay constant and a
    same-size resize is the identity.
    """
    x = as_tensor(x)
    _check_4d("resize_bilinear input", x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    b, c, h, w = x.shape
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    sx = np.broadcast_to(sx[None, None, :], (b, out_h, out_w))
    sy = np.broadcast_to(sy[None, :, None], (b, out_h, out_w))
    x0, x1, fx = _corner_setup(sx, w)
    y0, y1, fy = _corner_setup(sy, h)

    v00 = _gather(x.data, y0, x0)
    v01 = _gather(x.data, y0, x1)
    v10 = _gather(x.data, y1, x0)
    v11 = _gather(x.data, y1, x1)
    wfx = fx[:, None]
    wfy = fy[:, None]
    out = ((1 - wfy) * ((1 - wfx) * v00 + wfx * v01)) + (wfy * ((1 - wfx) * v10 + wfx * v11))
    out = np.ascontiguousarray(out)

    if not _record((x,)):
        return Tensor._from_op(out, (), None)

    def bwd(g: np.ndarray) -> None:
        grad_x = _scatter_corners(
            x.shape,
            [
                (y0, x0, (1 - wfy) * (1 - wfx) * g),
                (y0, x1, (1 - wfy) * wfx * g),
                (y1, x0, wfy * (1 - wfx) * g),
                (y1, x1, wfy * wfx * g),
            ],
        )
        _accumulate(x, grad_x)

    return Tensor._from_op(out, (x,), bwd)


__all__ = [
    "conv2d",
    "conv2d_transposed",
    "grid_sample_bilinear",
    "resize_bilinear",
    "concat",
]
