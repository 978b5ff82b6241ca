"""Differentiable primitives.

Elementwise ops follow numpy broadcasting restricted to size-1 or missing
leading axes; the adjoint is summed back to the operand shape. ``matmul``
and the attention-cube ops require exact batch-shape equality.
"""

from __future__ import annotations

import numpy as np

from mtalab.core.tensor import Tensor, as_tensor, get_dtype, make_node
from mtalab.errors import ConfigError, NumericError, ShapeError


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _const(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a.data)
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b.data)
    b = _const(b, a.data)
    out = a.data - b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b.data)
    b = _const(b, a.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None,
        )

    return make_node(ad / bd, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_node(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_node(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with batch dims required to match exactly.

    ``b`` may also be a plain 2-D weight shared across the batch of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared_weight = b.ndim == 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if shared_weight:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_node(ad @ bd, (a, b), bw, "matmul")


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every operand index must appear in the output or the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_s = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")

    def letters(s):
        return set(s.replace("...", ""))

    for s, other in ((sa, sb), (sb, sa)):
        if not letters(s) <= letters(out_s) | letters(other):
            raise ShapeError(f"einsum {spec!r}: index summed out of a single operand is unsupported")
    ad, bd = a.data, b.data

    def grad_for(target, g, other_s, other_d, shape):
        tgt = target
        lead = "..." in (out_s + other_s) and "..." not in target
        if lead:
            tgt = "..." + target
        r = np.einsum(f"{out_s},{other_s}->{tgt}", g, other_d)
        if lead:
            r = r.reshape((-1,) + shape).sum(axis=0) if r.ndim > len(shape) else r
        return r

    def bw(g):
        ga = grad_for(sa, g, sb, bd, a.shape) if a.requires_grad else None
        gb = grad_for(sb, g, sa, ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(np.einsum(spec, ad, bd), (a, b), bw, "einsum")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis. ``-inf`` entries map to exactly 0; an all ``-inf`` row gives zeros."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    m = xd.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_node(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def _causal_upper(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def causal_fill(x: Tensor, value: float) -> Tensor:
    """Replace entries strictly above the diagonal of the last two axes by ``value``."""
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"causal mask needs square trailing dims, got {x.shape}")
    upper = _causal_upper(x.shape[-1])
    out = np.where(upper, np.asarray(value, dtype=x.data.dtype), x.data)
    return make_node(out, (x,), lambda g: (np.where(upper, 0.0, g).astype(g.dtype),), "causal_fill")


def _key_offsets(c_k: int) -> range:
    # column c of a kernel row holds key offset j' = c - floor(c_k / 2)
    return range(-(c_k // 2), (c_k + 1) // 2)


def _shift_slices(t: int, a: int, b: int):
    """Slices (dst, src) such that dst[i, j] pairs with src[i - a, j - b] inside a T x T plane."""
    if a >= t or abs(b) >= t:
        return None
    rows_dst, rows_src = slice(a, t), slice(0, t - a)
    if b >= 0:
        cols_dst, cols_src = slice(b, t), slice(0, t - b)
    else:
        cols_dst, cols_src = slice(0, t + b), slice(-b, t)
    return (Ellipsis, rows_dst, cols_dst), (Ellipsis, rows_src, cols_src)


def conv2d_anchored(x: Tensor, kernel: Tensor, bounds: tuple[int, int] | None = None) -> Tensor:
    """Zero-padded 2-D convolution over the (query, key) plane.

    ``out[i, j] = sum_{a, b} kernel[a, b + c_k // 2] * x[i - a, j - b]`` with query offsets
    ``a = 0 .. c_q - 1`` (past rows only) and key offsets ``b = -(c_k // 2) .. ceil(c_k / 2) - 1``.
    Positive ``b`` reads past keys. ``kernel`` is ``(c_q, c_k)`` shared by all leading axes, or
    ``(M, c_q, c_k)`` with one kernel per head along axis ``-3`` of ``x``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"conv2d_anchored needs (..., T, T) input, got {x.shape}")
    per_head = kernel.ndim == 3
    if kernel.ndim not in (2, 3):
        raise ShapeError(f"kernel must be (c_q, c_k) or (M, c_q, c_k), got {kernel.shape}")
    c_q, c_k = kernel.shape[-2:]
    if bounds is not None and (c_q > bounds[0] or c_k > bounds[1]):
        raise ConfigError(f"kernel {kernel.shape[-2:]} exceeds configured size {tuple(bounds)}")
    if per_head and (x.ndim < 3 or x.shape[-3] != kernel.shape[0]):
        raise ShapeError(f"per-head kernel {kernel.shape} does not match head axis of {x.shape}")
    t = x.shape[-1]
    xd, kd = x.data, kernel.data
    taps = []
    for a in range(c_q):
        for col, b in enumerate(_key_offsets(c_k)):
            sl = _shift_slices(t, a, b)
            if sl is not None:
                taps.append((a, col, sl))

    def coef(a, col):
        return kd[:, a, col][:, None, None] if per_head else kd[a, col]

    out = np.zeros_like(xd)
    for a, col, (dst, src) in taps:
        out[dst] += coef(a, col) * xd[src]

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for a, col, (dst, src) in taps:
                gx[src] += coef(a, col) * g[dst]
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            for a, col, (dst, src) in taps:
                prod = g[dst] * xd[src]
                if per_head:
                    axes = tuple(i for i in range(prod.ndim) if i != prod.ndim - 3)
                    gk[:, a, col] = prod.sum(axis=axes)
                else:
                    gk[a, col] = prod.sum()
        return gx, gk

    return make_node(out, (x, kernel), bw, "conv2d_anchored")


def conv3d_grouped(x: Tensor, kernel: Tensor) -> Tensor:
    """Joint head-group / query / key convolution.

    ``x`` is ``(..., M, T, T)``; ``kernel`` is ``(M, c_h, c_q, c_k)``. Output head ``g`` in group
    ``G`` sums the anchored 2-D convolution of each input head ``h`` of ``G`` with ``kernel[g, h]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    m, c_h, c_q, c_k = kernel.shape
    if x.ndim < 3 or x.shape[-3] != m or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"conv3d input {x.shape} does not match kernel {kernel.shape}")
    if m % c_h:
        raise ConfigError(f"head kernel size {c_h} does not divide {m} heads")
    groups = m // c_h
    t = x.shape[-1]
    lead = x.shape[:-3]
    xg = x.data.reshape(lead + (groups, c_h, t, t))
    kg = kernel.data.reshape(groups, c_h, c_h, c_q, c_k)
    taps = []
    for a in range(c_q):
        for col, b in enumerate(_key_offsets(c_k)):
            sl = _shift_slices(t, a, b)
            if sl is not None:
                taps.append((a, col, sl))

    out = np.zeros_like(xg)
    for a, col, (dst, src) in taps:
        out[dst] += np.einsum("goh,...ghij->...goij", kg[..., a, col], xg[src])

    def bw(g):
        g = g.reshape(out.shape)
        gx = gk = None
        if x.requires_grad:
            gx = np.zeros_like(xg)
            for a, col, (dst, src) in taps:
                gx[src] += np.einsum("goh,...goij->...ghij", kg[..., a, col], g[dst])
            gx = gx.reshape(x.shape)
        if kernel.requires_grad:
            gk = np.zeros_like(kg)
            for a, col, (dst, src) in taps:
                gd, xs = g[dst], xg[src]
                gk[..., a, col] = np.einsum(
                    "bgoij,bghij->goh",
                    gd.reshape((-1,) + gd.shape[-4:]),
                    xs.reshape((-1,) + xs.shape[-4:]),
                )
            gk = gk.reshape(kernel.shape)
        return gx, gk

    return make_node(out.reshape(x.shape), (x, kernel), bw, "conv3d_grouped")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    wd = weight.data

    def bw(g):
        gw = np.zeros_like(wd)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wd.shape[-1]))
        return (gw,)

    return make_node(wd[ids], (weight,), bw, "embedding")


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs ``(2k, 2k+1)`` of ``(..., T, d)`` by per-position angles.

    ``cos``/``sin`` have shape ``(T, d // 2)``.
    """
    xd = x.data
    x1, x2 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return make_node(out, (x,), bw, "rotary")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is true."""
    ld = logits.data
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("cross_entropy mask selects no positions")
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = np.asarray(nll[mask].sum() / count, dtype=ld.dtype)

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        p *= (mask[..., None] * (g / count)).astype(p.dtype)
        return (p,)

    return make_node(loss, (logits,), bw, "cross_entropy")
