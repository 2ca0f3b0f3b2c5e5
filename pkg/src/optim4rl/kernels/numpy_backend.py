"""Reference numpy implementations of the fused cell kernels.

Forward gate products use einsum rather than BLAS matmul: einsum keeps a
fixed inner summation order, so a batch of size n gives bit-identical
rows to n separate batch-1 calls.  The per-coordinate optimizer batching
is checked against a scalar loop oracle, which needs exactly that.
Backward products reduce over the batch axis and carry no bit-level
contract, so they use plain matmul for speed.

Gate packing convention (columns of the weight matrices):
  GRU:  [reset | update | candidate]          wx (I, 3H), wh (H, 3H), b (3H,)
  LSTM: [input | forget | cell | output]      wx (I, 4H), wh (H, 4H), b (4H,)
"""

import numpy as np


def _sigmoid(x):
    return np.where(
        x >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    )


def check_cell_shapes(name, x, h, wx, wh, b, gates):
    # explicit row check: broadcasting would silently pair a 1-row h
    # with an n-row x, and the compiled twin indexes h without bounds
    # checks, so neither backend may ever see mismatched rows
    H = h.shape[1] if getattr(h, "ndim", 0) == 2 else -1
    ok = (
        getattr(x, "ndim", 0) == 2
        and x.shape[0] == h.shape[0]
        and tuple(wx.shape) == (x.shape[1], gates * H)
        and tuple(wh.shape) == (H, gates * H)
        and tuple(b.shape) == (gates * H,)
    )
    if not ok:
        raise ValueError(
            f"{name}: inconsistent shapes x{tuple(x.shape)} h{tuple(h.shape)} "
            f"wx{tuple(wx.shape)} wh{tuple(wh.shape)} b{tuple(b.shape)}"
        )


def gru_cell_forward(x, h, wx, wh, b):
    """One GRU step over a batch.

    Args:
      x: (n, I) inputs; h: (n, H) previous hidden; wx/wh/b: packed gates.
    Returns:
      (h_new, cache) where cache feeds gru_cell_backward.
    """
    check_cell_shapes("gru_cell_forward", x, h, wx, wh, b, 3)
    H = h.shape[1]
    ax = np.einsum("ij,jk->ik", x, wx) + b
    ah = np.einsum("ij,jk->ik", h, wh)
    r = _sigmoid(ax[:, :H] + ah[:, :H])
    z = _sigmoid(ax[:, H : 2 * H] + ah[:, H : 2 * H])
    hn = ah[:, 2 * H :]
    n = np.tanh(ax[:, 2 * H :] + r * hn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, wx, wh, r, z, n, hn)


def gru_cell_backward(dh_new, cache):
    x, h, wx, wh, r, z, n, hn = cache
    if tuple(dh_new.shape) != tuple(h.shape):
        raise ValueError(f"gru_cell_backward: dh_new{tuple(dh_new.shape)} vs h{tuple(h.shape)}")
    H = h.shape[1]
    dz = dh_new * (h - n)
    dn = dh_new * (1.0 - z)
    dh = dh_new * z
    da_n = dn * (1.0 - n * n)
    dr = da_n * hn
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    gx = np.concatenate([da_r, da_z, da_n], axis=1)
    gh = np.concatenate([da_r, da_z, da_n * r], axis=1)
    dwx = x.T @ gx
    dwh = h.T @ gh
    db = gx.sum(axis=0)
    dx = gx @ wx.T
    dh = dh + gh @ wh.T
    return dx, dh, dwx, dwh, db


def lstm_cell_forward(x, h, c, wx, wh, b):
    """One LSTM step over a batch; returns (h_new, c_new, cache)."""
    check_cell_shapes("lstm_cell_forward", x, h, wx, wh, b, 4)
    if tuple(c.shape) != tuple(h.shape):
        raise ValueError(f"lstm_cell_forward: c{tuple(c.shape)} vs h{tuple(h.shape)}")
    H = h.shape[1]
    a = np.einsum("ij,jk->ik", x, wx) + np.einsum("ij,jk->ik", h, wh) + b
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H : 2 * H])
    g = np.tanh(a[:, 2 * H : 3 * H])
    o = _sigmoid(a[:, 3 * H :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, (x, h, c, wx, wh, i, f, g, o, c_new)


def lstm_cell_backward(dh_new, dc_new, cache):
    x, h, c, wx, wh, i, f, g, o, c_new = cache
    if tuple(dh_new.shape) != tuple(h.shape) or tuple(dc_new.shape) != tuple(h.shape):
        raise ValueError(
            f"lstm_cell_backward: dh_new{tuple(dh_new.shape)} dc_new{tuple(dc_new.shape)} vs h{tuple(h.shape)}"
        )
    tc = np.tanh(c_new)
    do = dh_new * tc
    dct = dc_new + dh_new * o * (1.0 - tc * tc)
    di = dct * g
    df = dct * c
    dg = dct * i
    dc = dct * f
    da = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
        axis=1,
    )
    dwx = x.T @ da
    dwh = h.T @ da
    db = da.sum(axis=0)
    dx = da @ wx.T
    dh = da @ wh.T
    return dx, dh, dc, dwx, dwh, db


def conv2d_forward(x, w, b):
    """Valid-padding stride-1 convolution.

    Args:
      x: (B, C, H, W); w: (F, C, kh, kw); b: (F,).
    Returns:
      (y, cache) with y of shape (B, F, H-kh+1, W-kw+1).
    """
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    oh, ow = H - kh + 1, W - kw + 1
    cols = np.empty((B, C, kh, kw, oh, ow), dtype=np.float64)
    for a in range(kh):
        for bb in range(kw):
            cols[:, :, a, bb] = x[:, :, a : a + oh, bb : bb + ow]
    cols2 = cols.reshape(B, C * kh * kw, oh * ow)
    y = np.einsum("fk,bkp->bfp", w.reshape(F, -1), cols2) + b[None, :, None]
    y = y.reshape(B, F, oh, ow)
    return y, (x.shape, cols2, w)


def conv2d_backward(dy, cache):
    x_shape, cols2, w = cache
    B, C, H, W = x_shape
    F, _, kh, kw = w.shape
    oh, ow = H - kh + 1, W - kw + 1
    dyf = dy.reshape(B, F, oh * ow)
    dw = np.einsum("bfp,bkp->fk", dyf, cols2).reshape(w.shape)
    db = dyf.sum(axis=(0, 2))
    dcols2 = np.einsum("fk,bfp->bkp", w.reshape(F, -1), dyf)
    dcols = dcols2.reshape(B, C, kh, kw, oh, ow)
    dx = np.zeros(x_shape, dtype=np.float64)
    for a in range(kh):
        for bb in range(kw):
            dx[:, :, a : a + oh, bb : bb + ow] += dcols[:, :, a, bb]
    return dx, dw, db
