"""Neural net primitives with explicit forward/backward pairs, numpy only.

Every forward returns (output, cache); the matching backward consumes the
cache and upstream gradient. Convolutions are stride 1 with zero "same"
padding; gradients w.r.t. inputs are computed as convolutions with the
spatially flipped, channel-transposed kernel, which is exact for stride 1
and symmetric padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def act_forward(x: np.ndarray, kind: str):
    if kind == "relu":
        mask = x > 0
        return x * mask, mask
    if kind == "identity":
        return x, None
    raise ValueError(f"unknown activation {kind!r}")


def act_backward(dy: np.ndarray, cache) -> np.ndarray:
    return dy if cache is None else dy * cache


def dropout_forward(x: np.ndarray, p: float, rng: np.random.Generator | None, train: bool):
    if not train or p <= 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an RNG")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask) -> np.ndarray:
    return dy if mask is None else dy * mask


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    # x: (B, D_in), w: (D_out, D_in), b: (D_out,)
    return x @ w.T + b, x


def dense_backward(dy: np.ndarray, cache, w: np.ndarray):
    x = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def _conv2d_patches(x: np.ndarray, kh: int, kw: int, dil_t: int) -> np.ndarray:
    """(B, C, T, F, kh, kw) view of padded input; window rows are dilated in time."""
    pad_t = (kh - 1) * dil_t // 2
    pad_f = (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad_t, pad_t), (pad_f, pad_f)))
    eff_t = (kh - 1) * dil_t + 1
    win = sliding_window_view(xp, (eff_t, kw), axis=(2, 3))
    return win[..., ::dil_t, :]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, dil_t: int):
    """2-D conv, stride 1, same padding, dilation (dil_t, 1).

    x: (B, C_in, T, F), w: (C_out, C_in, KH, KW) with odd KH, KW.
    """
    B, _, T, F = x.shape
    c_out, c_in, kh, kw = w.shape
    win = _conv2d_patches(x, kh, kw, dil_t)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * T * F, c_in * kh * kw)
    y = cols @ w.reshape(c_out, -1).T + b
    y = y.reshape(B, T, F, c_out).transpose(0, 3, 1, 2)
    return y, (x.shape, cols, w.shape, dil_t)


def conv2d_backward(dy: np.ndarray, cache, w: np.ndarray):
    x_shape, cols, w_shape, dil_t = cache
    B, _, T, F = x_shape
    c_out, c_in, kh, kw = w_shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(B * T * F, c_out)
    dw = (dy_mat.T @ cols).reshape(w_shape)
    db = dy_mat.sum(axis=0)
    # input gradient: conv of dy with the flipped, channel-transposed kernel
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = conv2d_forward(dy, np.ascontiguousarray(w_flip), np.zeros(c_in, dtype=dy.dtype), dil_t)
    return dx, dw, db


def maxpool_freq2_forward(x: np.ndarray):
    """Window-2 stride-2 max pool over the last (frequency) axis, ceil mode."""
    B, C, T, F = x.shape
    f_out = (F + 1) // 2
    if F % 2:
        pad = np.full((B, C, T, 1), -np.inf, dtype=x.dtype)
        xp = np.concatenate([x, pad], axis=3)
    else:
        xp = x
    pairs = xp.reshape(B, C, T, f_out, 2)
    arg = pairs.argmax(axis=4)
    y = np.take_along_axis(pairs, arg[..., None], axis=4)[..., 0]
    return y, (x.shape, arg)


def maxpool_freq2_backward(dy: np.ndarray, cache):
    x_shape, arg = cache
    B, C, T, F = x_shape
    f_out = arg.shape[3]
    dxp = np.zeros((B, C, T, f_out, 2), dtype=dy.dtype)
    np.put_along_axis(dxp, arg[..., None], dy[..., None], axis=4)
    return dxp.reshape(B, C, T, 2 * f_out)[..., :F]


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """1-D conv over time, stride 1, same padding.

    x: (B, T, D_in), w: (D_out, D_in, K). K = 1 reduces to a per-frame linear map.
    """
    B, T, _ = x.shape
    d_out, d_in, k = w.shape
    if k == 1:
        y = x @ w[:, :, 0].T + b
        return y, (x, w.shape, None)
    pl = (k - 1) // 2
    pr = k - 1 - pl
    xp = np.pad(x, ((0, 0), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)  # (B, T, D_in, K)
    cols = win.reshape(B * T, d_in * k)
    y = (cols @ w.reshape(d_out, -1).T + b).reshape(B, T, d_out)
    return y, (x, w.shape, cols)


def conv1d_backward(dy: np.ndarray, cache, w: np.ndarray):
    x, w_shape, cols = cache
    B, T, d_in = x.shape
    d_out, _, k = w_shape
    dy_mat = dy.reshape(B * T, d_out)
    db = dy_mat.sum(axis=0)
    if k == 1:
        dw = (dy_mat.T @ x.reshape(B * T, d_in))[:, :, None]
        dx = dy @ w[:, :, 0]
        return dx, dw, db
    dw = (dy_mat.T @ cols).reshape(w_shape)
    pl = (k - 1) // 2
    dxp = np.zeros((B, T + k - 1, d_in), dtype=dy.dtype)
    # g[b,t,d,kk] = sum_o dy[b,t,o] w[o,d,kk], scattered onto the padded time axis
    g = np.einsum("bto,odk->btdk", dy, w)
    for kk in range(k):
        dxp[:, kk : kk + T, :] += g[:, :, :, kk]
    return dxp[:, pl : pl + T, :], dw, db


def _split3(a: np.ndarray, h: int):
    return a[..., :h], a[..., h : 2 * h], a[..., 2 * h :]


def gru_forward(x: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray,
                b_ih: np.ndarray, b_hh: np.ndarray, reverse: bool = False):
    """Single-direction GRU; returns the final hidden state.

    x: (B, T, D). Gate rows in w_ih/w_hh are stacked [reset; update; new],
    each `hidden` rows:

        r_t = sigmoid(W_ir x_t + b_ir + W_hr h_{t-1} + b_hr)
        z_t = sigmoid(W_iz x_t + b_iz + W_hz h_{t-1} + b_hz)
        n_t = tanh(W_in x_t + b_in + r_t * (W_hn h_{t-1} + b_hn))
        h_t = (1 - z_t) * n_t + z_t * h_{t-1}
    """
    B, T, _ = x.shape
    h_dim = w_hh.shape[1]
    xs = x[:, ::-1, :] if reverse else x
    gi = xs @ w_ih.T + b_ih  # (B, T, 3H), input contributions for all steps
    h = np.zeros((B, h_dim), dtype=x.dtype)
    steps = []
    for t in range(T):
        gh = h @ w_hh.T + b_hh
        gi_r, gi_z, gi_n = _split3(gi[:, t], h_dim)
        gh_r, gh_z, gh_n = _split3(gh, h_dim)
        r = sigmoid(gi_r + gh_r)
        z = sigmoid(gi_z + gh_z)
        n = np.tanh(gi_n + r * gh_n)
        h_new = (1.0 - z) * n + z * h
        steps.append((h, r, z, n, gh_n))
        h = h_new
    return h, (xs, steps, h_dim, reverse)


def gru_backward(dh: np.ndarray, cache, w_ih: np.ndarray, w_hh: np.ndarray):
    """BPTT for gru_forward when the loss depends only on the final state."""
    xs, steps, h_dim, reverse = cache
    B, T, _ = xs.shape
    dtype = dh.dtype
    dgi = np.zeros((B, T, 3 * h_dim), dtype=dtype)
    dw_hh = np.zeros_like(w_hh)
    db_hh = np.zeros(3 * h_dim, dtype=dtype)
    dh = dh.copy()
    for t in range(T - 1, -1, -1):
        h_prev, r, z, n, gh_n = steps[t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_next = dh * z
        da_n = dn * (1.0 - n * n)
        da_r = (da_n * gh_n) * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dgh_n = da_n * r
        dgi[:, t, :h_dim] = da_r
        dgi[:, t, h_dim : 2 * h_dim] = da_z
        dgi[:, t, 2 * h_dim :] = da_n
        dgh = np.concatenate([da_r, da_z, dgh_n], axis=1)
        dw_hh += dgh.T @ h_prev
        db_hh += dgh.sum(axis=0)
        dh = dh_next + dgh @ w_hh
    dgi_mat = dgi.reshape(B * T, 3 * h_dim)
    xs_mat = xs.reshape(B * T, -1)
    dw_ih = dgi_mat.T @ xs_mat
    db_ih = dgi_mat.sum(axis=0)
    dx = (dgi_mat @ w_ih).reshape(B, T, -1)
    if reverse:
        dx = dx[:, ::-1, :]
    return dx, dw_ih, dw_hh, db_ih, db_hh


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
