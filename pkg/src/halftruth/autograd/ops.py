"""Differentiable primitives.

Layout conventions: sequences are channel-first ``[B, C, T]`` for
convolution, pooling and batch norm (a 2-D ``[C, T]`` input is treated as a
single unbatched example) and time-major ``[B, T, D]`` for attention and the
LSTM. Dense weights are stored ``[in, out]`` so ``affine(x, W, b) = x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_node(np.sum(x.data, axis=axis), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        g = g / n
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(np.mean(x.data, axis=axis), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return make_node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def index(x: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return make_node(x.data[idx], (x,), bw, "index")


def concat(xs, axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return make_node(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        "concat",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_node(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# dense / convolution


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; ``W`` is ``[in, out]``."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"affine: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"affine: bias shape {b.shape} != ({W.shape[1]},)")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ W.data.T
        gW = x.data.reshape(-1, x.shape[-1]).T @ g2
        return (gx, gW) + ((g2.sum(axis=0),) if b is not None else ())

    parents = (x, W) if b is None else (x, W, b)
    return make_node(out, parents, bw, "affine")


def _batched(x: Tensor, core_ndim: int):
    if x.ndim == core_ndim:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != core_ndim + 1:
        raise ValueError(f"expected {core_ndim}-D or batched {core_ndim + 1}-D input, got shape {x.shape}")
    return x, False


def conv1d(x: Tensor, W: Tensor, b: Tensor | None = None, groups: int = 1, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. ``x`` is ``[B, C_in, T]`` (or ``[C_in, T]``); ``W`` is ``[C_out, C_in/groups, K]``."""
    x, squeeze = _batched(x, 2)
    B, C, T = x.shape
    O, Cg, K = W.shape
    if C % groups or O % groups or Cg * groups != C:
        raise ValueError(f"conv1d: C_in={C}, C_out={O}, weight {W.shape} incompatible with groups={groups}")
    if b is not None and b.shape != (O,):
        raise ValueError(f"conv1d: bias shape {b.shape} != ({O},)")
    T_out = T + 2 * padding - K + 1
    if T_out < 1:
        raise ValueError("conv1d: kernel longer than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    depthwise = groups == C and O == C
    G, Og = groups, O // groups

    if depthwise:
        w = W.data[:, 0, :]
        out = np.zeros((B, O, T_out), dtype=x.dtype)
        for k in range(K):
            out += w[None, :, k, None] * xp[:, :, k : k + T_out]
    else:
        xg = xp.reshape(B, G, Cg, -1)
        wg = W.data.reshape(G, Og, Cg, K)
        out = np.zeros((B, G, Og, T_out), dtype=x.dtype)
        for k in range(K):
            out += np.matmul(wg[None, :, :, :, k], xg[:, :, :, k : k + T_out])
        out = out.reshape(B, O, T_out)
    if b is not None:
        out += b.data[None, :, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gW = np.zeros_like(W.data)
        if depthwise:
            for k in range(K):
                gxp[:, :, k : k + T_out] += w[None, :, k, None] * g
                gW[:, 0, k] = np.einsum("bct,bct->c", g, xp[:, :, k : k + T_out])
        else:
            gg = g.reshape(B, G, Og, T_out)
            gxg = gxp.reshape(B, G, Cg, -1)
            gWg = gW.reshape(G, Og, Cg, K)
            for k in range(K):
                xs = xg[:, :, :, k : k + T_out]
                gWg[:, :, :, k] = np.matmul(gg, np.swapaxes(xs, -1, -2)).sum(axis=0)
                gxg[:, :, :, k : k + T_out] += np.matmul(np.swapaxes(wg[None, :, :, :, k], -1, -2), gg)
        gx = gxp[:, :, padding : padding + T] if padding else gxp
        grads = (gx, gW)
        if b is not None:
            grads += (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, W) if b is None else (x, W, b)
    y = make_node(out, parents, bw, "conv1d")
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, W: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1, groups=1 2-D cross-correlation. ``x`` is ``[B, C, H, W]`` (or ``[C, H, W]``)."""
    x, squeeze = _batched(x, 3)
    B, C, H, Wd = x.shape
    O, Ci, KH, KW = W.shape
    if Ci != C:
        raise ValueError(f"conv2d: input channels {C} != weight channels {Ci}")
    if b is not None and b.shape != (O,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({O},)")
    H_out, W_out = H + 2 * padding - KH + 1, Wd + 2 * padding - KW + 1
    if H_out < 1 or W_out < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((B, O, H_out * W_out), dtype=x.dtype)
    for i in range(KH):
        for j in range(KW):
            xs = np.ascontiguousarray(xp[:, :, i : i + H_out, j : j + W_out]).reshape(B, C, -1)
            out += np.matmul(W.data[:, :, i, j], xs)
    out = out.reshape(B, O, H_out, W_out)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        g2 = g.reshape(B, O, -1)
        gxp = np.zeros_like(xp)
        gW = np.zeros_like(W.data)
        for i in range(KH):
            for j in range(KW):
                xs = np.ascontiguousarray(xp[:, :, i : i + H_out, j : j + W_out]).reshape(B, C, -1)
                gW[:, :, i, j] = np.matmul(g2, np.swapaxes(xs, 1, 2)).sum(axis=0)
                gxp[:, :, i : i + H_out, j : j + W_out] += np.matmul(W.data[:, :, i, j].T, g2).reshape(
                    B, C, H_out, W_out
                )
        gx = gxp[:, :, p : p + H, p : p + Wd] if p else gxp
        grads = (gx, gW)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, W) if b is None else (x, W, b)
    y = make_node(out, parents, bw, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# normalisation and pooling


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=np.float32))

    @classmethod
    def create(cls, channels: int, dtype=np.float32):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), np.zeros((), dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis except the channel axis.

    ``x`` is ``[B, C, ...]``; a 2-D input is read as unbatched ``[C, T]``.
    """
    ch_axis = 0 if x.ndim == 2 else 1
    axes = tuple(a for a in range(x.ndim) if a != ch_axis)
    bshape = [1] * x.ndim
    bshape[ch_axis] = x.shape[ch_axis]
    bshape = tuple(bshape)
    gm, bt = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    if training:
        n = x.size // x.shape[ch_axis]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu.reshape(-1)
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * unbiased
        state.num_batches_tracked[...] = state.num_batches_tracked + 1

        def bw(g):
            gxhat = g * gm
            gx = inv_std / n * (
                n * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        if state.num_batches_tracked <= 0:
            raise RuntimeError("batch_norm in eval mode before any training step: running stats uninitialised")
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv_std

        def bw(g):
            return g * gm * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (gm * xhat + bt).astype(x.dtype)
    return make_node(out, (x, gamma, beta), bw, "batch_norm")


def max_pool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pool over the last axis; a ragged tail is dropped."""
    T = x.shape[-1]
    n = T // size
    if n == 0:
        raise ValueError("max_pool1d: axis shorter than the window")
    windows = x.data[..., : n * size].reshape(x.shape[:-1] + (n, size))
    # argmax returns the first maximum: ties route to the lower index
    arg = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[..., : n * size] = gw.reshape(x.shape[:-1] + (n * size,))
        return (gx,)

    return make_node(out, (x,), bw, "max_pool1d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pool over the last two axes."""
    H, W = x.shape[-2:]
    nh, nw = H // size, W // size
    if nh == 0 or nw == 0:
        raise ValueError("max_pool2d: input smaller than the window")
    lead = x.shape[:-2]
    crop = x.data[..., : nh * size, : nw * size]
    k = len(lead)
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3)
    windows = crop.reshape(lead + (nh, size, nw, size)).transpose(perm).reshape(lead + (nh, nw, size * size))
    arg = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        gcrop = gw.reshape(lead + (nh, nw, size, size)).transpose(perm).reshape(lead + (nh * size, nw * size))
        gx = np.zeros_like(x.data)
        gx[..., : nh * size, : nw * size] = gcrop
        return (gx,)

    return make_node(out, (x,), bw, "max_pool2d")


def adaptive_avg_pool_to_1(x: Tensor, n_spatial: int = 1) -> Tensor:
    """Mean over the trailing ``n_spatial`` axes."""
    axes = tuple(range(x.ndim - n_spatial, x.ndim))
    if any(x.shape[a] == 0 for a in axes):
        raise ValueError("adaptive_avg_pool_to_1: empty spatial axis")
    return mean(x, axes)


# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes."""
    d = Q.shape[-1]
    if K.shape[-1] != d:
        raise ValueError(f"query dim {d} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError("keys and values need the same length")
    scores = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), V)


MHA_KEYS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, params: dict, n_heads: int) -> Tensor:
    """Projected multi-head attention; inputs ``[B, T, D]`` or unbatched ``[T, D]``."""
    d_model = params["w_q"].shape[1]
    if d_model % n_heads:
        raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
    dh = d_model // n_heads
    squeeze = query.ndim == 2
    if squeeze:
        query, key, value = (reshape(t, (1,) + t.shape) for t in (query, key, value))

    def heads(t, w, b):
        B, T, _ = t.shape
        p = affine(t, params[w], params[b])
        return transpose(reshape(p, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(query, "w_q", "b_q")
    k = heads(key, "w_k", "b_k")
    v = heads(value, "w_v", "b_v")
    att = scaled_dot_attention(q, k, v)
    B, _, Tq, _ = att.shape
    merged = reshape(transpose(att, (0, 2, 1, 3)), (B, Tq, d_model))
    out = affine(merged, params["w_o"], params["b_o"])
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# recurrent


def lstm_layer(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over ``x`` ``[B, T, I]`` with zero initial state.

    Weights are ``w_ih [I, 4H]``, ``w_hh [H, 4H]``; gate order is input,
    forget, cell, output. Returns hidden states ``[B, T, H]`` aligned with
    the input time axis.
    """
    x, squeeze = _batched(x, 2)
    B, T, I = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (I, 4 * H) or w_hh.shape != (H, 4 * H) or b_ih.shape != (4 * H,) or b_hh.shape != (4 * H,):
        raise ValueError("lstm_layer: parameter shapes inconsistent with input")
    if T < 1:
        raise ValueError("lstm_layer: empty sequence")
    dt = x.dtype
    xw = (x.data.reshape(-1, I) @ w_ih.data + (b_ih.data + b_hh.data)).reshape(B, T, 4 * H)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    gates = np.empty((T, B, 4 * H), dtype=dt)
    cells = np.empty((T, B, H), dtype=dt)
    tanh_c = np.empty((T, B, H), dtype=dt)
    hs = np.empty((T, B, H), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    whh = w_hh.data
    for t in steps:
        a = xw[:, t] + h @ whh
        gt = gates[t]
        gt[:, : 2 * H] = expit(a[:, : 2 * H])
        gt[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
        gt[:, 3 * H :] = expit(a[:, 3 * H :])
        c = gt[:, H : 2 * H] * c + gt[:, :H] * gt[:, 2 * H : 3 * H]
        tc = np.tanh(c)
        h = gt[:, 3 * H :] * tc
        cells[t], tanh_c[t], hs[t] = c, tc, h
    out = np.ascontiguousarray(hs.transpose(1, 0, 2))

    def bw(g):
        gT = g.transpose(1, 0, 2)
        dxw = np.empty((T, B, 4 * H), dtype=dt)
        dW_hh = np.zeros_like(whh)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        zeros = np.zeros((B, H), dtype=dt)
        order = list(steps)
        for n in range(T - 1, -1, -1):
            t = order[n]
            prev = order[n - 1] if n > 0 else None
            gt = gates[t]
            i, f, gg, o = gt[:, :H], gt[:, H : 2 * H], gt[:, 2 * H : 3 * H], gt[:, 3 * H :]
            c_prev = cells[prev] if prev is not None else zeros
            h_prev = hs[prev] if prev is not None else zeros
            dh = gT[t] + dh_next
            tc = tanh_c[t]
            dc = dc_next + dh * o * (1 - tc * tc)
            da = dxw[t]
            da[:, :H] = dc * gg * i * (1 - i)
            da[:, H : 2 * H] = dc * c_prev * f * (1 - f)
            da[:, 2 * H : 3 * H] = dc * i * (1 - gg * gg)
            da[:, 3 * H :] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dW_hh += h_prev.T @ da
            dh_next = da @ whh.T
        dxw_b = dxw.transpose(1, 0, 2).reshape(-1, 4 * H)
        dx = (dxw_b @ w_ih.data.T).reshape(B, T, I)
        dW_ih = x.data.reshape(-1, I).T @ dxw_b
        db = dxw_b.sum(axis=0)
        return dx, dW_ih, dW_hh, db, db.copy()

    y = make_node(out, (x, w_ih, w_hh, b_ih, b_hh), bw, "lstm_layer")
    return reshape(y, y.shape[1:]) if squeeze else y


LSTM_KEYS = ("w_ih", "w_hh", "b_ih", "b_hh")


def lstm_bidirectional(x: Tensor, params: list[dict]) -> Tensor:
    """Stacked bidirectional LSTM.

    ``params[layer]`` maps ``"fw"``/``"bw"`` to dicts with ``LSTM_KEYS``.
    Each layer outputs ``[..., T, 2H]`` (forward then backward states).
    """
    h = x
    for layer in params:
        fw = lstm_layer(h, *(layer["fw"][k] for k in LSTM_KEYS))
        bw = lstm_layer(h, *(layer["bw"][k] for k in LSTM_KEYS), reverse=True)
        h = concat([fw, bw], axis=-1)
    return h
