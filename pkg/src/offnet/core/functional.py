"""Spatial ops: convolution, bilinear resizing and a dense layer helper."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_node


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (B, C, H, W) -> (B, C, kh, kw, Ho, Wo) view-free gather of strided windows
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``.
        weight: ``[C_out, C_in // groups, kh, kw]``.
        bias: optional ``[C_out]``.
        groups: channel groups; ``groups == C_in == C_out`` is depthwise.

    Returns:
        ``[C_out, H', W']`` (or batched), ``H' = (H + 2p - kh) // stride + 1``.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W] input and 4-d kernels, got {x.shape}, {weight.shape}")
    b, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if c_in % groups or c_out % groups or c_in // groups != c_in_g:
        raise DimensionError(f"conv2d channels: input {x.shape}, kernels {weight.shape}, groups {groups}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}x{wo} < 1 for input {x.shape}, kernel {kh}x{kw}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _windows(xp, kh, kw, stride, ho, wo)
    g = groups
    co_g = c_out // g
    cols_g = cols.reshape(b, g, c_in_g, kh, kw, ho, wo)
    w_g = weight.data.reshape(g, co_g, c_in_g, kh, kw)
    if g == 1:
        out = np.tensordot(w_g[0], cols_g[:, 0], axes=([1, 2, 3], [1, 2, 3]))  # (co, b, ho, wo)
        out = out.transpose(1, 0, 2, 3)
    elif co_g == 1 and c_in_g == 1:
        out = np.einsum("bgijhw,gij->bghw", cols_g[:, :, 0], w_g[:, 0, 0])
    else:
        out = np.einsum("bgcijhw,gocij->bgohw", cols_g, w_g).reshape(b, c_out, ho, wo)
    out = np.ascontiguousarray(out.reshape(b, c_out, ho, wo))
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(gout):
        go = gout.reshape(b, g, co_g, ho, wo)
        gw = gx = None
        if weight.requires_grad:
            if g == 1:
                gw = np.tensordot(go[:, 0], cols_g[:, 0], axes=([0, 2, 3], [0, 4, 5]))
            elif co_g == 1 and c_in_g == 1:
                gw = np.einsum("bghw,bgijhw->gij", go[:, :, 0], cols_g[:, :, 0])
            else:
                gw = np.einsum("bgohw,bgcijhw->gocij", go, cols_g)
            gw = gw.reshape(weight.shape)
        if x.requires_grad:
            if g == 1:
                gcols = np.tensordot(go[:, 0], w_g[0], axes=([1], [0]))  # (b, ho, wo, c, kh, kw)
                gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
            elif co_g == 1 and c_in_g == 1:
                gcols = go[:, :, 0][:, :, None, None] * w_g[:, 0, 0][None, :, :, :, None, None]
            else:
                gcols = np.einsum("bgohw,gocij->bgcijhw", go, w_g)
            gcols = gcols.reshape(b, c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=np.result_type(gout, weight.data))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    result = make_node(out, parents, grad_fn)
    return result.reshape(c_out, ho, wo) if unbatched else result


def _bilinear_axis(in_size: int, out_size: int):
    """Source indices and weights for one axis, ``align_corners=False``."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    return i0, i1, frac


def _interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    i0, i1, frac = _bilinear_axis(in_size, out_size)
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the two trailing axes of a plain array.

    Uses the ``a + t * (b - a)`` form so a constant input stays exactly constant.
    """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    fy = fy.astype(x.dtype)[:, None]
    fx = fx.astype(x.dtype)
    top, bot = x[..., y0, :], x[..., y1, :]
    rows = top + fy * (bot - top)
    left, right = rows[..., x0], rows[..., x1]
    return left + fx * (right - left)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of ``[..., H, W]`` (``align_corners=False``)."""
    h, w = x.shape[-2:]
    out = resize_bilinear_array(x.data, out_h, out_w)

    def grad_fn(g):
        if (h, w) == (out_h, out_w):
            return (g,)
        ry = _interp_matrix(h, out_h).astype(g.dtype)
        rx = _interp_matrix(w, out_w).astype(g.dtype)
        return (ry.T @ g @ rx,)

    return make_node(out, (x,), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out ``[in, out]``."""
    out = x @ weight
    return out if bias is None else out + bias


def gather_class(probs: Tensor, labels: np.ndarray, axis: int) -> Tensor:
    """Pick ``probs`` at class ``labels`` along ``axis`` (one-hot contraction).

    Boolean labels are read as class indices 0/1, not as a mask.
    """
    probs = as_tensor(probs)
    n = probs.shape[axis]
    labels = np.asarray(labels).astype(np.int64)
    onehot = np.moveaxis(np.eye(n, dtype=probs.dtype)[labels], -1, axis)
    return (probs * onehot).sum(axis=axis)
