"""Parameter update rules: classical and learned.

Classical rules (SGD, RMSProp, Adam) carry per-parameter moment trees.
The learned rules are coordinatewise recurrent networks sharing one set
of meta-parameters across all coordinates:

  optim4rl  dual GRU(8)+MLP[16,16,1] branches producing pseudo first and
            second moments; update -alpha * m / sqrt(v + eps)
  linear    one GRU(8)+MLP[16,16,2] emitting (a, b); update -alpha*(a*g+b)
  rnn       one GRU(8)+MLP[16,16,1] emitting the update directly (scaled
            by -alpha)

All learned rules see only a processed form of the gradient: the input
is clipped to [-1, 1] and mapped to (sign(g), log(|g| + 1e-18)).  Both
processed values are data, never differentiated: meta-gradients flow
through the networks and their hidden states, not through the gradient
inputs.  Every update function exists in tape mode (meta parameters and
hidden banks are Tensors) and numeric mode (plain arrays), selected by
the type of the incoming gradient vector.
"""

import numpy as np

from . import nets
from .autodiff import ShapeMismatch, Tensor, straight_through_binary_sign

PROCESS_EPS = 1e-18   # epsilon_1: floor inside log(|g| + eps)
DENOM_EPS = 1e-18     # epsilon_2: floor inside sqrt(v + eps)
GRAD_CLIP = 1.0       # c: input gradient clipping
SIGN_BIAS = 1.0       # b: bias inside tanh(o_1 + b)
RNN_HIDDEN = 8
MLP_HIDDEN = [16, 16]

LEARNED_KINDS = ("optim4rl", "linear", "rnn")
CLASSICAL_KINDS = ("sgd", "rmsprop", "adam")


# ---------------------------------------------------------------------------
# gradient processing


def process_gradient(g):
    """Map a gradient to the pair (sign(g), log(|g| + 1e-18)).

    Accepts arrays or Tensors; always returns constants (plain data
    wrapped as leaf Tensors in tape mode), which is what makes the pair
    stop-gradiented: nothing connects back to g on the tape.
    """
    raw = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    s = np.sign(raw)
    lg = np.log(np.abs(raw) + PROCESS_EPS)
    if isinstance(g, Tensor):
        return Tensor(s), Tensor(lg)
    return s, lg


# ---------------------------------------------------------------------------
# classical rules


def init_classical_state(kind, params):
    """Moment trees for one classical optimizer over a ParamTree."""
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    if kind == "sgd":
        return {}
    if kind == "rmsprop":
        return {"v": zeros}
    if kind == "adam":
        return {"m": zeros, "v": {k: z.copy() for k, z in zeros.items()}, "t": 0}
    raise ValueError(f"unknown classical optimizer {kind!r}")


def classical_update(kind, state, grads, alpha):
    """One classical step; returns (updates, new_state).

    SGD:      -alpha * g
    RMSProp:  v' = 0.99 v + 0.01 g^2;  -alpha * g / sqrt(v' + 1e-8)
    Adam:     bias-corrected moments (0.9, 0.999);
              -alpha * m_hat / (sqrt(v_hat) + 1e-8)
    """
    if kind == "sgd":
        return {k: -alpha * g for k, g in grads.items()}, state
    if kind == "rmsprop":
        for k, g in grads.items():
            if state["v"][k].shape != g.shape:
                raise ShapeMismatch("rmsprop", state["v"][k].shape, g.shape)
        v = {k: 0.99 * state["v"][k] + 0.01 * g * g for k, g in grads.items()}
        upd = {k: -alpha * g / np.sqrt(v[k] + 1e-8) for k, g in grads.items()}
        return upd, {"v": v}
    if kind == "adam":
        for k, g in grads.items():
            if state["m"][k].shape != g.shape:
                raise ShapeMismatch("adam", state["m"][k].shape, g.shape)
        t = state["t"] + 1
        m = {k: 0.9 * state["m"][k] + 0.1 * g for k, g in grads.items()}
        v = {k: 0.999 * state["v"][k] + 0.001 * g * g for k, g in grads.items()}
        c1 = 1.0 - 0.9**t
        c2 = 1.0 - 0.999**t
        upd = {k: -alpha * (m[k] / c1) / (np.sqrt(v[k] / c2) + 1e-8) for k in grads}
        return upd, {"m": m, "v": v, "t": t}
    raise ValueError(f"unknown classical optimizer {kind!r}")


# ---------------------------------------------------------------------------
# learned rules


def init_learned_params(kind, seed):
    """Meta-parameter tree for one learned optimizer.

    Final MLP layers start at zero so the initial behaviour is benign:
    sign-SGD for optim4rl (o1 = o2 = 0 gives m = sign(g), v = 1) and a
    null update for the linear/rnn rules.
    """
    if kind not in LEARNED_KINDS:
        raise ValueError(f"unknown learned optimizer {kind!r}")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    ss = seed.spawn(4)
    out_width = {"optim4rl": 1, "linear": 2, "rnn": 1}[kind]
    params = {}
    branches = ("1", "2") if kind == "optim4rl" else ("1",)
    for i, br in enumerate(branches):
        in_dim = 2 if (kind != "optim4rl" or br == "1") else 1
        rnn = nets.init_params("gru", (in_dim, RNN_HIDDEN), ss[2 * i])
        mlp = nets.init_params("mlp", [RNN_HIDDEN] + MLP_HIDDEN + [out_width], ss[2 * i + 1])
        last = len(MLP_HIDDEN)
        mlp[f"{last}/w"] = np.zeros_like(mlp[f"{last}/w"])
        params.update({f"rnn{br}/{k}": v for k, v in rnn.items()})
        params.update({f"mlp{br}/{k}": v for k, v in mlp.items()})
    return params


def init_bank(kind, n_coords):
    return nets.HiddenStateBank.zeros(n_coords, RNN_HIDDEN, dual=(kind == "optim4rl"))


def _check_finite(raw):
    if not np.isfinite(raw).all():
        raise ValueError("non-finite gradient fed to a learned optimizer; the agent has diverged")


def _branch(meta, bank_h, x, br, tape):
    """Run one RNN+MLP branch; returns (output column, new hidden)."""
    rnn = nets.subtree(meta, f"rnn{br}/")
    mlp = nets.subtree(meta, f"mlp{br}/")
    if tape:
        h_new, y = nets.gru_step(rnn, bank_h, x)
        return nets.mlp_apply(mlp, y), h_new
    h_new, y = nets.gru_step_np(rnn, bank_h, x)
    return nets.mlp_apply_np(mlp, y), h_new


def optim4rl_update(meta, bank, g, alpha):
    """One coordinatewise update of the dual-branch learned optimizer.

    g is the flat (n,) gradient vector (Tensor or array); bank holds the
    per-coordinate hidden rows.  Returns (flat updates, new bank).

    Pipeline: clip g to [-1, 1]; process to (sign, log|.|); branch 1
    reads [sign, log] and emits o1, giving a signed pseudo first moment
    m = sign(g) * st_sign(tanh(o1 + 1)) * exp(o1); branch 2 reads
    2*log|g| and emits o2, giving v = exp(o2) > 0; the update is
    -alpha * m / sqrt(v + 1e-18).
    """
    tape = isinstance(next(iter(meta.values())), Tensor)
    raw = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    _check_finite(raw)
    clipped = np.clip(raw, -GRAD_CLIP, GRAD_CLIP)
    gs = np.sign(clipped)[:, None]
    gl = np.log(np.abs(clipped) + PROCESS_EPS)[:, None]

    if tape:
        x1 = Tensor(np.concatenate([gs, gl], axis=1))
        o1, h1 = _branch(meta, bank.h1, x1, "1", tape=True)
        m_sign = straight_through_binary_sign((o1 + SIGN_BIAS).tanh())
        m = Tensor(gs) * m_sign * o1.exp()
        o2, h2 = _branch(meta, bank.h2, Tensor(2.0 * gl), "2", tape=True)
        v = o2.exp()
        delta = (m * (-alpha)) / (v + DENOM_EPS).sqrt()
        return delta.reshape(-1), nets.HiddenStateBank(h1, h2)

    x1 = np.concatenate([gs, gl], axis=1)
    o1, h1 = _branch(meta, bank.h1, x1, "1", tape=False)
    soft = np.tanh(o1 + SIGN_BIAS)
    m_sign = 2.0 * (soft >= 0) - 1.0
    m = gs * m_sign * np.exp(o1)
    o2, h2 = _branch(meta, bank.h2, 2.0 * gl, "2", tape=False)
    v = np.exp(o2)
    delta = -alpha * m / np.sqrt(v + DENOM_EPS)
    return delta.reshape(-1), nets.HiddenStateBank(h1, h2)


def linear_optim_update(meta, bank, g, alpha):
    """Linear-form learned rule: delta = -alpha * (a * g + b).

    a and b come from one GRU+MLP branch over the processed (clipped)
    gradient; g in the product is the clipped gradient, as data.
    """
    tape = isinstance(next(iter(meta.values())), Tensor)
    raw = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    _check_finite(raw)
    clipped = np.clip(raw, -GRAD_CLIP, GRAD_CLIP)
    gs = np.sign(clipped)[:, None]
    gl = np.log(np.abs(clipped) + PROCESS_EPS)[:, None]
    x = np.concatenate([gs, gl], axis=1)

    if tape:
        out, h1 = _branch(meta, bank.h1, Tensor(x), "1", tape=True)
        a, b = out[:, 0:1], out[:, 1:2]
        delta = (a * Tensor(clipped[:, None]) + b) * (-alpha)
        return delta.reshape(-1), nets.HiddenStateBank(h1)

    out, h1 = _branch(meta, bank.h1, x, "1", tape=False)
    delta = -alpha * (out[:, 0:1] * clipped[:, None] + out[:, 1:2])
    return delta.reshape(-1), nets.HiddenStateBank(h1)


def rnn_optim_update(meta, bank, g, alpha):
    """Plain recurrent rule: the branch output is the update itself."""
    tape = isinstance(next(iter(meta.values())), Tensor)
    raw = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    _check_finite(raw)
    clipped = np.clip(raw, -GRAD_CLIP, GRAD_CLIP)
    gs = np.sign(clipped)[:, None]
    gl = np.log(np.abs(clipped) + PROCESS_EPS)[:, None]
    x = np.concatenate([gs, gl], axis=1)

    if tape:
        out, h1 = _branch(meta, bank.h1, Tensor(x), "1", tape=True)
        delta = out * (-alpha)
        return delta.reshape(-1), nets.HiddenStateBank(h1)

    out, h1 = _branch(meta, bank.h1, x, "1", tape=False)
    return (-alpha * out).reshape(-1), nets.HiddenStateBank(h1)


UPDATE_FNS = {
    "optim4rl": optim4rl_update,
    "linear": linear_optim_update,
    "rnn": rnn_optim_update,
}


def make_update_fn(kind, meta):
    """Bind meta-parameters, giving the (flat_g, bank, alpha) form that
    coordinatewise application expects."""
    fn = UPDATE_FNS[kind]

    def update(flat_g, bank, alpha):
        return fn(meta, bank, flat_g, alpha)

    return update
