"""Neural building blocks and parameter-tree utilities.

A ParamTree is a flat dict mapping path strings to values.  Values are
either numpy arrays (numeric mode: rollouts, frozen-optimizer evaluation)
or autodiff Tensors (tape mode: anything that needs gradients).  The
flatten/unflatten helpers dispatch on the value type so the same code
drives both modes.

Flattening order is deterministic: lexicographic by path, row-major
within each array.  Everything that indexes per-coordinate state (the
hidden-state banks of learned optimizers) relies on this ordering.
"""

import numpy as np

from . import kernels as K
from .autodiff import ShapeMismatch, Tensor, concat

# ---------------------------------------------------------------------------
# parameter trees


def tree_flatten(tree):
    """Flatten a ParamTree to a single vector.

    Returns (flat, struct) where struct records (path, shape) pairs in
    lexicographic path order; tree_unflatten(struct, flat) inverts this
    exactly.  Works on arrays and on Tensors (staying on the tape).
    """
    paths = sorted(tree)
    struct = [(p, tuple(np.shape(tree[p].data if isinstance(tree[p], Tensor) else tree[p]))) for p in paths]
    vals = [tree[p] for p in paths]
    if isinstance(vals[0], Tensor):
        flat = concat([v.reshape(-1) for v in vals], axis=0)
    else:
        flat = np.concatenate([np.ravel(v) for v in vals])
    return flat, struct


def tree_unflatten(struct, flat):
    out, off = {}, 0
    for path, shape in struct:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out[path] = flat[off : off + n].reshape(shape)
        off += n
    return out


def tree_size(tree):
    return sum(int(np.prod(np.shape(v.data if isinstance(v, Tensor) else v))) for v in tree.values())


def tree_map(fn, *trees):
    return {k: fn(*(t[k] for t in trees)) for k in trees[0]}


def subtree(tree, prefix):
    """Sub-dict of all paths under `prefix`, with the prefix stripped."""
    return {k[len(prefix) :]: v for k, v in tree.items() if k.startswith(prefix)}


def as_tensors(tree):
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in tree.items()}


def as_arrays(tree):
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in tree.items()}


# ---------------------------------------------------------------------------
# initialization


def init_params(kind, sizes, seed):
    """Initialize one block of parameters.

    kind/sizes:
      'mlp'  : [in, hidden..., out]
      'gru'  : (in, hidden)   -> wx (I,3H), wh (H,3H), b (3H,)
      'lstm' : (in, hidden)   -> wx (I,4H), wh (H,4H), b (4H,)
      'conv' : (in_channels, features, kernel)

    Weights are uniform on ±sqrt(1/fan_in); all biases start at zero.
    Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)

    def w(fan_in, shape):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if kind == "mlp":
        params = {}
        for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"{i}/w"] = w(fin, (fin, fout))
            params[f"{i}/b"] = np.zeros(fout)
        return params
    if kind in ("gru", "lstm"):
        i_dim, h_dim = sizes
        gates = 3 if kind == "gru" else 4
        return {
            "wx": w(i_dim, (i_dim, gates * h_dim)),
            "wh": w(h_dim, (h_dim, gates * h_dim)),
            "b": np.zeros(gates * h_dim),
        }
    if kind == "conv":
        c_in, features, k = sizes
        return {
            "w": w(c_in * k * k, (features, c_in, k, k)),
            "b": np.zeros(features),
        }
    raise ValueError(f"unknown block kind {kind!r}")


# ---------------------------------------------------------------------------
# blocks, tape mode


def mlp_apply(params, x):
    """Affine layers with ReLU between them; the last layer is linear."""
    n_layers = sum(1 for k in params if k.endswith("/w"))
    for i in range(n_layers):
        x = x @ params[f"{i}/w"] + params[f"{i}/b"]
        if i < n_layers - 1:
            x = x.relu()
    return x


def gru_step(params, h, x):
    """One GRU step on the tape via the fused kernel.

    Candidate gate uses the reset-gated hidden state (n = tanh(W_n x +
    r * (U_n h) + b_n), the convention where the reset multiplies the
    recurrent contribution).  Returns (h_new, y) with y = h_new.
    """
    wx, wh, b = params["wx"], params["wh"], params["b"]
    if x.data.ndim != 2 or x.data.shape[1] != wx.data.shape[0]:
        raise ShapeMismatch("gru_step", x.shape, wx.shape)
    if h.data.shape != (x.data.shape[0], wh.data.shape[0]):
        raise ShapeMismatch("gru_step", h.shape, x.shape)
    h_data, cache = K.gru_cell_forward(x.data, h.data, wx.data, wh.data, b.data)
    out = Tensor(h_data, (x, h, wx, wh, b), "gru_cell")

    def _bw():
        dx, dh, dwx, dwh, db = K.gru_cell_backward(out.grad, cache)
        x.grad += dx
        h.grad += dh
        wx.grad += dwx
        wh.grad += dwh
        b.grad += db

    out._backward = _bw
    return out, out


def lstm_step(params, state, x):
    """One LSTM step on the tape; state is (h, c).  Returns ((h', c'), y).

    The fused kernel produces h' and c' together; they are exposed as two
    slices of one packed node so the single backward closure runs only
    after both outputs have received their upstream gradients.
    """
    h, c = state
    wx, wh, b = params["wx"], params["wh"], params["b"]
    if x.data.ndim != 2 or x.data.shape[1] != wx.data.shape[0]:
        raise ShapeMismatch("lstm_step", x.shape, wx.shape)
    if h.data.shape != (x.data.shape[0], wh.data.shape[0]):
        raise ShapeMismatch("lstm_step", h.shape, x.shape)
    h_data, c_data, cache = K.lstm_cell_forward(x.data, h.data, c.data, wx.data, wh.data, b.data)
    H = h_data.shape[1]
    pair = Tensor(np.concatenate([h_data, c_data], axis=1), (x, h, c, wx, wh, b), "lstm_cell")

    def _bw():
        dx, dh, dc, dwx, dwh, db = K.lstm_cell_backward(pair.grad[:, :H], pair.grad[:, H:], cache)
        x.grad += dx
        h.grad += dh
        c.grad += dc
        wx.grad += dwx
        wh.grad += dwh
        b.grad += db

    pair._backward = _bw
    h_new = pair[:, :H]
    c_new = pair[:, H:]
    return (h_new, c_new), h_new


def conv2d_apply(params, x):
    """Valid-padding stride-1 convolution + ReLU + flatten, fused.

    x is (B, C, H, W); output is (B, F*(H-k+1)*(W-k+1)).
    """
    w, b = params["w"], params["b"]
    _, _, kh, kw = w.data.shape
    if x.data.ndim != 4 or x.data.shape[2] < kh or x.data.shape[3] < kw:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    y, cache = K.conv2d_forward(x.data, w.data, b.data)
    out = Tensor(np.maximum(y, 0.0).reshape(y.shape[0], -1), (x, w, b), "conv2d_relu_flat")

    def _bw():
        dy = out.grad.reshape(y.shape) * (y > 0)
        dx, dw, db = K.conv2d_backward(dy, cache)
        x.grad += dx
        w.grad += dw
        b.grad += db

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# blocks, numeric mode (no tape; used in rollouts and frozen evaluation)


def mlp_apply_np(params, x):
    n_layers = sum(1 for k in params if k.endswith("/w"))
    for i in range(n_layers):
        # einsum keeps rows bit-identical across batch sizes (BLAS does not)
        x = np.einsum("ij,jk->ik", x, params[f"{i}/w"]) + params[f"{i}/b"]
        if i < n_layers - 1:
            x = np.maximum(x, 0.0)
    return x


def gru_step_np(params, h, x):
    if h.shape != (x.shape[0], params["wh"].shape[0]):
        raise ShapeMismatch("gru_step", h.shape, x.shape)
    h_new, _ = K.gru_cell_forward(x, h, params["wx"], params["wh"], params["b"])
    return h_new, h_new


def lstm_step_np(params, state, x):
    h, c = state
    if h.shape != (x.shape[0], params["wh"].shape[0]):
        raise ShapeMismatch("lstm_step", h.shape, x.shape)
    h_new, c_new, _ = K.lstm_cell_forward(x, h, c, params["wx"], params["wh"], params["b"])
    return (h_new, c_new), h_new


def conv2d_apply_np(params, x):
    y, _ = K.conv2d_forward(x, params["w"], params["b"])
    return np.maximum(y, 0.0).reshape(y.shape[0], -1)


# ---------------------------------------------------------------------------
# per-coordinate optimizer state


class HiddenStateBank:
    """Per-coordinate recurrent state of a learned optimizer.

    h1/h2 are (coordinate_count, hidden) arrays or Tensors; h2 is None
    for single-RNN optimizers.  Rows are aligned with the flattening
    order of the agent ParamTree.
    """

    def __init__(self, h1, h2=None):
        self.h1 = h1
        self.h2 = h2

    @classmethod
    def zeros(cls, n_coords, hidden, dual=True):
        z = np.zeros((n_coords, hidden))
        return cls(z, z.copy() if dual else None)

    @property
    def n_coords(self):
        return self.h1.shape[0]

    def detach(self):
        """Numeric copy: cuts any tape links (used at window boundaries)."""
        pull = lambda t: np.array(t.data if isinstance(t, Tensor) else t)
        return HiddenStateBank(pull(self.h1), None if self.h2 is None else pull(self.h2))

    def tensorize(self):
        """Tape copy: rows become constant leaves (used at window starts)."""
        wrap = lambda a: a if isinstance(a, Tensor) else Tensor(np.array(a))
        return HiddenStateBank(wrap(self.h1), None if self.h2 is None else wrap(self.h2))


def coordinatewise_apply(update_fn, grads, bank, alpha):
    """Apply a per-scalar update function to every coordinate of a tree.

    update_fn(flat_grads, bank, alpha) -> (flat_updates, bank') is applied
    once over the full flattened gradient vector (the function itself is
    coordinatewise, so batching it is exact).  Returns the updates with
    the tree structure of `grads` plus the advanced bank.
    """
    flat, struct = tree_flatten(grads)
    n = flat.shape[0]
    if bank is not None and bank.n_coords != n:
        raise ValueError(
            f"hidden-state bank holds {bank.n_coords} coordinates but the "
            f"gradient tree flattens to {n}; the bank is stale"
        )
    flat_updates, bank_new = update_fn(flat, bank, alpha)
    return tree_unflatten(struct, flat_updates), bank_new
