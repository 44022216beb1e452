"""Fused neural-net kernels on top of tensor.py: N-d convolution and its
transpose, instance/layer norm, softmax, and a depthwise causal 1-d conv.

These are single tape nodes with hand-written backwards (the closed forms are
cheaper and numerically tighter than composing primitives); every one of them
is covered by the finite-difference registry in gradcheck.py.

Convolutions run as im2col + GEMM.  The transposed convolution is the exact
adjoint of ``conv_nd`` under the same (stride, padding) geometry — both
directions share the same two index maps (``_im2col``/``_col2im``), so
<conv(x, w), y> == <x, conv_transpose(y, w)> holds to rounding error, with
the *same* weight array: conv weights are (out_ch, in_ch, *k), transposed
conv weights are (in_ch, out_ch, *k).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as _tensor
from .tensor import ContractError, Tensor, record

__all__ = [
    "conv_nd",
    "conv_transpose_nd",
    "causal_conv1d",
    "instance_norm",
    "layer_norm",
    "softmax",
]


def _per_axis(value, rank: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        value = (value,) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ContractError(f"{name}: expected {rank} values, got {value}")
    if any(v < 0 for v in value) or (name == "stride" and any(v < 1 for v in value)):
        raise ContractError(f"{name}: invalid {value}")
    return value


def _im2col(arr: np.ndarray, k, stride, padding, out_sp) -> np.ndarray:
    """(B, C, *sp) -> (B, C*prod(k), prod(out_sp)) patch matrix."""
    rank = len(k)
    b, c = arr.shape[:2]
    xp = np.pad(arr, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    win = sliding_window_view(xp, k, axis=tuple(range(2, 2 + rank)))
    sub = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    win = win[sub]  # (B, C, *out_sp, *k)
    perm = (0, 1) + tuple(2 + rank + d for d in range(rank)) + tuple(2 + d for d in range(rank))
    k_total = int(np.prod(k))
    p_total = int(np.prod(out_sp))
    return win.transpose(perm).reshape(b, c * k_total, p_total)


def _col2im(cols: np.ndarray, c: int, sp, k, stride, padding, grid_sp) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back onto a (B, C, *sp) canvas."""
    rank = len(k)
    b = cols.shape[0]
    padded = tuple(n + 2 * p for n, p in zip(sp, padding))
    canvas = np.zeros((b, c) + padded, dtype=cols.dtype)
    blocks = cols.reshape((b, c) + tuple(k) + tuple(grid_sp))
    lead = (slice(None), slice(None))
    for off in np.ndindex(*k):
        sl = tuple(
            slice(off[d], off[d] + stride[d] * (grid_sp[d] - 1) + 1, stride[d])
            for d in range(rank)
        )
        canvas[lead + sl] += blocks[lead + off]
    core = tuple(slice(p, p + n) for p, n in zip(padding, sp))
    return canvas[lead + core]


def _check_conv_args(x: Tensor, w: Tensor, bias, op: str) -> int:
    for t in (x, w) + ((bias,) if bias is not None else ()):
        if not isinstance(t, Tensor):
            raise ContractError(f"{op}: inputs must be Tensors")
        if t.data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ContractError(f"{op}: requires float tensors, got {t.data.dtype}")
        if t.data.dtype != x.data.dtype:
            raise ContractError(f"{op}: mixed dtypes")
    rank = w.ndim - 2
    if rank not in (1, 2, 3):
        raise ContractError(f"{op}: weight must be rank 3..5 (1-3 spatial dims), got shape {w.shape}")
    if x.ndim != rank + 2:
        raise ContractError(f"{op}: input shape {x.shape} does not match weight shape {w.shape}")
    return rank


def conv_nd(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation: (B, Cin, *sp) x (Cout, Cin, *k) -> (B, Cout, *out).

    ``out[d] = (sp[d] + 2*padding[d] - k[d]) // stride[d] + 1``.
    """
    rank = _check_conv_args(x, w, bias, "conv_nd")
    stride = _per_axis(stride, rank, "stride")
    padding = _per_axis(padding, rank, "padding")
    b, cin = x.shape[:2]
    cout, cin_w = w.shape[:2]
    k = w.shape[2:]
    if cin_w != cin:
        raise ContractError(f"conv_nd: input has {cin} channels, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ContractError(f"conv_nd: bias shape {bias.shape} != ({cout},)")
    sp = x.shape[2:]
    out_sp = tuple(
        (n + 2 * p - kk) // s + 1 for n, p, kk, s in zip(sp, padding, k, stride)
    )
    if any(n + 2 * p < kk for n, p, kk in zip(sp, padding, k)) or any(o < 1 for o in out_sp):
        raise ContractError(
            f"conv_nd: kernel {k} does not fit input {sp} with padding {padding}"
        )

    cols = _im2col(x.data, k, stride, padding, out_sp)  # (B, Cin*K, P)
    w2 = w.data.reshape(cout, -1)
    y2 = np.matmul(w2, cols)  # (B, Cout, P)
    if bias is not None:
        y2 = y2 + bias.data[:, None]
    out = Tensor(y2.reshape((b, cout) + out_sp))

    def vjp(g):
        g2 = g.reshape(b, cout, -1)
        gw = np.einsum("bop,bkp->ok", g2, cols).reshape(w.shape)
        if _tensor._BACKWARD_FAULT[0] != 0.0:
            gw = gw * (1.0 + _tensor._BACKWARD_FAULT[0])
        gcols = np.matmul(w2.T, g2)
        gx = _col2im(gcols, cin, sp, k, stride, padding, out_sp)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    inputs = (x, w) if bias is None else (x, w, bias)
    return record(out, inputs, vjp)


def conv_transpose_nd(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    output_size=None,
) -> Tensor:
    """Adjoint of ``conv_nd``: (B, Cin, *sp) x (Cin, Cout, *k) -> (B, Cout, *out).

    Default ``out[d] = (sp[d] - 1) * stride[d] - 2 * padding[d] + k[d]``;
    ``output_size`` may pick any other spatial size that the forward conv
    would have floored to the same ``sp`` (resolves the stride ambiguity).
    """
    rank = _check_conv_args(x, w, bias, "conv_transpose_nd")
    stride = _per_axis(stride, rank, "stride")
    padding = _per_axis(padding, rank, "padding")
    b, cin = x.shape[:2]
    cin_w, cout = w.shape[:2]
    k = w.shape[2:]
    if cin_w != cin:
        raise ContractError(
            f"conv_transpose_nd: input has {cin} channels, weight expects {cin_w}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ContractError(f"conv_transpose_nd: bias shape {bias.shape} != ({cout},)")
    sp = x.shape[2:]
    if output_size is None:
        out_sp = tuple(
            (n - 1) * s - 2 * p + kk for n, s, p, kk in zip(sp, stride, padding, k)
        )
    else:
        out_sp = tuple(int(v) for v in output_size)
        if len(out_sp) != rank:
            raise ContractError(f"conv_transpose_nd: output_size needs {rank} dims, got {out_sp}")
    ok = all(
        o + 2 * p >= kk and (o + 2 * p - kk) // s + 1 == n
        for o, p, kk, s, n in zip(out_sp, padding, k, stride, sp)
    )
    if not ok or any(o < 1 for o in out_sp):
        raise ContractError(
            f"conv_transpose_nd: output size {out_sp} is inconsistent with input {sp},"
            f" kernel {k}, stride {stride}, padding {padding}"
        )

    x2 = x.data.reshape(b, cin, -1)  # (B, Cin, P)
    w2 = w.data.reshape(cin, -1)  # (Cin, Cout*K)
    cols = np.matmul(w2.T, x2)  # (B, Cout*K, P)
    y = _col2im(cols, cout, out_sp, k, stride, padding, sp)
    if bias is not None:
        y = y + bias.data.reshape((1, cout) + (1,) * rank)
    out = Tensor(y)

    def vjp(g):
        gcols = _im2col(g, k, stride, padding, sp)  # (B, Cout*K, P)
        gx = np.matmul(w2, gcols).reshape(x.shape)
        gw = np.einsum("bip,bkp->ik", x2, gcols).reshape(w.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + rank)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return record(out, inputs, vjp)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution over the middle axis of (B, L, E).

    Left-pads with ``width - 1`` zeros so position t sees x[t-width+1 .. t]
    only; ``kernel`` is (E, width) with column ``width - 1`` as the tap on the
    current position.
    """
    for t in (x, kernel) + ((bias,) if bias is not None else ()):
        if not isinstance(t, Tensor) or t.data.dtype not in (
            np.dtype(np.float32),
            np.dtype(np.float64),
        ):
            raise ContractError("causal_conv1d: inputs must be float Tensors")
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != x.shape[2]:
        raise ContractError(
            f"causal_conv1d: expected x (B, L, E) and kernel (E, width), got {x.shape} and {kernel.shape}"
        )
    if bias is not None and bias.shape != (x.shape[2],):
        raise ContractError(f"causal_conv1d: bias shape {bias.shape} != ({x.shape[2]},)")
    b, length, emb = x.shape
    width = kernel.shape[1]
    xp = np.pad(x.data, ((0, 0), (width - 1, 0), (0, 0)))
    y = np.zeros_like(x.data)
    for tap in range(width):
        y += xp[:, tap : tap + length, :] * kernel.data[:, tap]
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        for tap in range(width):
            gxp[:, tap : tap + length, :] += g * kernel.data[:, tap]
            gk[:, tap] = (g * xp[:, tap : tap + length, :]).sum(axis=(0, 1))
        gx = gxp[:, width - 1 :, :]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 1))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, inputs, vjp)


def _check_norm_args(x: Tensor, gamma: Tensor, beta: Tensor, n_feat: int, op: str) -> None:
    for t in (x, gamma, beta):
        if not isinstance(t, Tensor) or t.data.dtype not in (
            np.dtype(np.float32),
            np.dtype(np.float64),
        ):
            raise ContractError(f"{op}: inputs must be float Tensors")
    if gamma.shape != (n_feat,) or beta.shape != (n_feat,):
        raise ContractError(
            f"{op}: gamma/beta must have shape ({n_feat},), got {gamma.shape} and {beta.shape}"
        )


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel) slice over its spatial extent.

    x is (B, C, *sp); gamma/beta are per-channel scale/shift.  Population
    variance (no Bessel correction), matching the norm used at train time.
    """
    if x.ndim < 3:
        raise ContractError(f"instance_norm: input must be (B, C, *spatial), got {x.shape}")
    c = x.shape[1]
    _check_norm_args(x, gamma, beta, c, "instance_norm")
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gshape = (1, c) + (1,) * (x.ndim - 2)
    out = Tensor(gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape))

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0,) + axes)
        gbeta = g.sum(axis=(0,) + axes)
        gh = g * gamma.data.reshape(gshape)
        gh_mean = gh.mean(axis=axes, keepdims=True)
        ghx_mean = (gh * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gh - gh_mean - xhat * ghx_mean)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; gamma/beta have that axis's length."""
    if x.ndim < 1:
        raise ContractError("layer_norm: input must have at least one axis")
    d = x.shape[-1]
    _check_norm_args(x, gamma, beta, d, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(gamma.data * xhat + beta.data)
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gamma.data
        gh_mean = gh.mean(axis=-1, keepdims=True)
        ghx_mean = (gh * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gh - gh_mean - xhat * ghx_mean)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Shift-stabilized softmax along ``axis``."""
    if not isinstance(x, Tensor) or x.data.dtype not in (
        np.dtype(np.float32),
        np.dtype(np.float64),
    ):
        raise ContractError("softmax: input must be a float Tensor")
    ax = axis % x.ndim if -x.ndim <= axis < x.ndim else axis
    if not 0 <= ax < x.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return ((g - dot) * y,)

    return record(out, (x,), vjp)
