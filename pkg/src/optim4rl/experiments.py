"""Diagnostics and training drivers: gradient collection, the identity
task, classical/frozen-optimizer agent training, and baselines.

Everything here emits machine-readable files (CSV or versioned binary)
reproducible bit-exactly from (config, seed).
"""

import dataclasses
import os
import pickle
import struct

import numpy as np

from . import nets, optimizers
from .agent import (
    ROLLOUT_STEPS,
    _log_softmax_np,
    a2c_loss,
    agent_apply_np,
    init_agent_params,
    rollout,
)
from .autodiff import Tensor, concat
from .gridworld import ENV_NAMES, N_ACTIONS, make_env, observe, reset, step
from .metatrain import DEFAULT_ALPHA, FALLBACK_ALPHA, load_checkpoint

GRAD_MAGIC = b"O4RLGRAD"
GRAD_VERSION = 1

RUN_CSV_HEADER = "iteration,seed,env,optimizer,return,inner_loss"
HIST_CSV_HEADER = "bin_left,bin_right,mass"
CURVE_CSV_HEADER = "epoch,loss,accuracy"

IDENTITY_MODES = ("raw", "processed", "random")
IDENTITY_LR_GRID = (3e-3, 1e-3, 3e-4, 1e-4)
IDENTITY_BAND = 0.1

ALL_KINDS = optimizers.CLASSICAL_KINDS + optimizers.LEARNED_KINDS


def default_alpha(env_name):
    return DEFAULT_ALPHA.get(env_name, FALLBACK_ALPHA)


# ---------------------------------------------------------------------------
# gradient datasets


class GradientDataset:
    """Agent gradients collected during training, one row per update.

    values is (iterations, n_coords); column j tracks the coordinate at
    flat index coord_indices[j] whose parameter path is paths[j].  The
    (iteration, parameter-path) annotation of any scalar is therefore
    its (row, column) position.
    """

    def __init__(self, values, coord_indices, paths, header):
        self.values = values
        self.coord_indices = coord_indices
        self.paths = paths
        self.header = header

    @property
    def count(self):
        return self.values.size

    def iteration_of(self, flat_pos):
        return flat_pos // self.values.shape[1]

    def path_of(self, flat_pos):
        return self.paths[flat_pos % self.values.shape[1]]

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(len(GRAD_MAGIC))
            if magic != GRAD_MAGIC:
                raise ValueError(f"{path} is not a gradient dataset")
            (version,) = struct.unpack("<i", f.read(4))
            if version != GRAD_VERSION:
                raise ValueError(f"unsupported gradient dataset version {version}")
            header = pickle.load(f)
            flat = np.fromfile(f, dtype=np.float64)
        n = len(header["paths"])
        values = flat.reshape(header["iterations"], n)
        return cls(values, np.asarray(header["coord_indices"]), header["paths"], header)


class _GradientWriter:
    """Streams dataset rows to disk behind a fixed header."""

    def __init__(self, path, header):
        self.f = open(path, "wb")
        self.f.write(GRAD_MAGIC)
        self.f.write(struct.pack("<i", GRAD_VERSION))
        pickle.dump(header, self.f, protocol=4)

    def write_row(self, row):
        self.f.write(np.ascontiguousarray(row, dtype=np.float64).tobytes())

    def close(self):
        self.f.close()


# ---------------------------------------------------------------------------
# agent training loop (shared by run_training and collect_gradients)


def _make_update_state(kind, theta, checkpoint=None, seed=0):
    """Optimizer state for a training run: classical moments, or a
    (phi, bank) pair for a frozen learned rule (zero-behaviour init when
    no checkpoint is given)."""
    if kind in optimizers.CLASSICAL_KINDS:
        return optimizers.init_classical_state(kind, theta)
    if checkpoint:
        payload = load_checkpoint(checkpoint)
        ck_kind = payload["config"]["optimizer"]
        if ck_kind != kind:
            raise ValueError(
                f"checkpoint holds a {ck_kind!r} optimizer, not {kind!r}")
        phi = payload["phi"]
    else:
        phi = optimizers.init_learned_params(kind, seed)
    bank = optimizers.init_bank(kind, nets.tree_size(theta))
    return {"phi": phi, "bank": bank}


def _apply_update(kind, opt_state, grads, alpha):
    if kind in optimizers.CLASSICAL_KINDS:
        return optimizers.classical_update(kind, opt_state, grads, alpha)
    fn = optimizers.make_update_fn(kind, opt_state["phi"])
    updates, bank = nets.coordinatewise_apply(fn, grads, opt_state["bank"], alpha)
    opt_state["bank"] = bank
    return updates, opt_state


def evaluate_policy(config, theta, episodes, rng):
    """Mean episodic return of the softmax policy, fresh episodes."""
    total = 0.0
    for _ in range(episodes):
        state, obs = reset(config, rng)
        ep = 0.0
        while not state.done:
            logits, _ = agent_apply_np(theta, obs[None])
            probs = np.exp(_log_softmax_np(logits[0]))
            a = int(np.searchsorted(np.cumsum(probs), rng.random()))
            a = min(a, N_ACTIONS - 1)
            state, obs, reward, _ = step(state, a)
            ep += reward
        total += ep
    return total / episodes


def random_policy_baseline(env_name, episodes=200, seed=0):
    """Monte-Carlo mean episodic return of the uniform-random policy."""
    config = make_env(env_name)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    total = 0.0
    for _ in range(episodes):
        state, _ = reset(config, rng)
        ep = 0.0
        while not state.done:
            state, _, reward, _ = step(state, int(rng.integers(N_ACTIONS)))
            ep += reward
        total += ep
    return total / episodes


def _train_loop(env_name, kind, alpha, iterations, seed,
                checkpoint=None, on_update=None,
                eval_every=0, eval_episodes=10, on_eval=None):
    """Train one A2C agent with a fixed optimizer; drive the callbacks.

    on_update(it, grads, loss, traj) fires after every update (it is
    1-based); on_eval(it, mean_return, loss) fires every eval_every
    updates and at the end.  The evaluation rng stream is separate from
    the training stream, so adding evaluations never perturbs training.
    """
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    config = make_env(env_name)
    root = np.random.SeedSequence(seed)
    theta_ss, env_ss, eval_ss = root.spawn(3)
    theta = init_agent_params(config, int(np.random.default_rng(theta_ss).integers(2**31)))
    rng = np.random.default_rng(env_ss)
    eval_rng = np.random.default_rng(eval_ss)
    opt_state = _make_update_state(kind, theta, checkpoint, seed)
    state = None
    loss_val = float("nan")

    for it in range(1, iterations + 1):
        theta_t = nets.as_tensors(theta)
        traj, state = rollout(config, state, theta, ROLLOUT_STEPS, rng)
        loss = a2c_loss(traj, theta_t)
        loss_val = float(loss.data)
        loss.backward()
        grads = {k: np.array(t.grad) for k, t in theta_t.items()}
        updates, opt_state = _apply_update(kind, opt_state, grads, alpha)
        theta = {k: theta[k] + updates[k] for k in theta}
        if on_update is not None:
            on_update(it, grads, loss_val, traj)
        if eval_every and on_eval is not None and (it % eval_every == 0 or it == iterations):
            ret = evaluate_policy(config, theta, eval_episodes, eval_rng)
            on_eval(it, ret, loss_val)
    return theta


def spread_coordinates(env_name, budget, seed=0):
    """Flat coordinate indices spread evenly over the parameter groups.

    A uniform draw over all coordinates lands almost entirely in the
    first feature matrix (it holds ~98% of the weights and, with one-hot
    observations, most of its per-window gradients are structurally
    zero).  Splitting the budget equally across groups keeps the traced
    stream representative of the whole gradient tree; groups smaller
    than their share contribute everything and the leftover budget goes
    to the largest group.
    """
    probe = init_agent_params(make_env(env_name), 0)
    _, struct_ = nets.tree_flatten(probe)
    sizes = [int(np.prod(shape)) for _, shape in struct_]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    n_total = int(np.sum(sizes))
    if not 0 < budget <= n_total:
        raise ValueError(f"budget must be in 1..{n_total}")
    share = [min(s, budget // len(sizes)) for s in sizes]
    spare = budget - sum(share)
    big = int(np.argmax(sizes))
    share[big] = min(sizes[big], share[big] + spare)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    idx = [start + rng.choice(size, size=k, replace=False)
           for start, size, k in zip(starts, sizes, share) if k]
    return np.sort(np.concatenate(idx))


def collect_gradients(env_name, optimizer="rmsprop", iterations=1000, seed=0,
                      alpha=None, coords=None, warmup=0, out=None):
    """Train an agent and record its per-update gradients.

    coords=None records every coordinate; an integer records a seeded
    uniform subset of that many coordinates; a sequence of flat indices
    records exactly those (full-length traces are kept either way, so
    recurrent models can consume the rows as sequences).
    warmup trains that many updates before recording starts, so a short
    recorded window can stand in for the long-run gradient mixture
    instead of being dominated by the initial transient.
    Streams to `out` when given, otherwise builds the dataset in memory.
    Non-finite gradients abort: the dataset holds finite values only.
    """
    if alpha is None:
        alpha = default_alpha(env_name)
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    config = make_env(env_name)
    probe = init_agent_params(config, 0)
    flat, struct_ = nets.tree_flatten(probe)
    n_total = flat.size
    paths_full = [p for p, shape in struct_ for _ in range(int(np.prod(shape)))]
    if coords is None:
        idx = np.arange(n_total)
    elif np.ndim(coords) == 1:
        idx = np.unique(np.asarray(coords, dtype=int))
        if idx.size == 0 or idx[0] < 0 or idx[-1] >= n_total:
            raise ValueError(f"coordinate indices must lie in 0..{n_total - 1}")
    else:
        if not 0 < coords <= n_total:
            raise ValueError(f"coords must be in 1..{n_total}")
        pick_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
        idx = np.sort(pick_rng.choice(n_total, size=coords, replace=False))
    paths = [paths_full[i] for i in idx]
    header = {
        "env": env_name, "optimizer": optimizer, "alpha": alpha,
        "seed": seed, "iterations": iterations, "warmup": warmup,
        "coord_indices": idx.tolist(), "paths": paths,
    }

    writer = _GradientWriter(out, header) if out is not None else None
    rows = [] if out is None else None

    def on_update(it, grads, loss, traj):
        if it <= warmup:
            return
        flat_g, _ = nets.tree_flatten(grads)
        row = flat_g[idx]
        if not np.isfinite(row).all():
            raise ValueError(f"non-finite gradient at update {it}; dataset aborted")
        if writer is not None:
            writer.write_row(row)
        else:
            rows.append(row)

    try:
        _train_loop(env_name, optimizer, alpha, warmup + iterations, seed,
                    on_update=on_update)
    finally:
        if writer is not None:
            writer.close()

    if out is not None:
        return GradientDataset.load(out)
    values = np.array(rows) if rows else np.zeros((0, idx.size))
    return GradientDataset(values, idx, paths, header)


# ---------------------------------------------------------------------------
# gradient histogram


def grad_histogram(dataset, bins=50):
    """Probability mass of log10(|g| + 1e-16) over [-16, 0].

    Transformed values are clamped into the range first (gradients above
    1 in magnitude land in the rightmost bin), so the masses always sum
    to one.  Returns (edges, mass).
    """
    values = dataset.values if isinstance(dataset, GradientDataset) else np.asarray(dataset)
    if values.size == 0:
        raise ValueError("empty gradient dataset")
    logs = np.log10(np.abs(values.ravel()) + 1e-16)
    logs = np.clip(logs, -16.0, 0.0)
    counts, edges = np.histogram(logs, bins=bins, range=(-16.0, 0.0))
    return edges, counts / values.size


# ---------------------------------------------------------------------------
# identity experiment


def _identity_model_init(in_dim, seed):
    ss = np.random.SeedSequence(seed).spawn(2)
    params = {}
    for k, v in nets.init_params("lstm", (in_dim, 8), ss[0]).items():
        params[f"lstm/{k}"] = v
    for k, v in nets.init_params("mlp", [8, 16, 16, 1], ss[1]).items():
        params[f"head/{k}"] = v
    return params


def _identity_forward_np(params, x):
    lstm = nets.subtree(params, "lstm/")
    head = nets.subtree(params, "head/")
    B, L, _ = x.shape
    h = np.zeros((B, 8))
    c = np.zeros((B, 8))
    out = np.empty((B, L))
    for t in range(L):
        (h, c), y = nets.lstm_step_np(lstm, (h, c), x[:, t, :])
        out[:, t] = nets.mlp_apply_np(head, y)[:, 0]
    return out


def _identity_loss(params_t, x, target):
    lstm = nets.subtree(params_t, "lstm/")
    head = nets.subtree(params_t, "head/")
    B, L, _ = x.shape
    h = Tensor(np.zeros((B, 8)))
    c = Tensor(np.zeros((B, 8)))
    cols = []
    for t in range(L):
        (h, c), y = nets.lstm_step(lstm, (h, c), Tensor(x[:, t, :]))
        cols.append(nets.mlp_apply(head, y))
    pred = cols[0] if L == 1 else concat(cols, axis=1)
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def band_accuracy(pred, target, band=IDENTITY_BAND):
    """Fraction of predictions inside [min, max] of (1 +- band) * target."""
    lo = np.minimum((1.0 - band) * target, (1.0 + band) * target)
    hi = np.maximum((1.0 - band) * target, (1.0 + band) * target)
    return float(np.mean((lo <= pred) & (pred <= hi)))


def _make_windows(dataset, seq_len, max_scalars, rng):
    """Cut coordinate traces into length-seq_len windows and take a
    seeded uniform sample of at most max_scalars total values.

    Windows whose every value is exactly zero are dropped: they carry
    no signal about echoing gradients, and with single-env rollouts the
    relu-dead stretches of a trace would otherwise flood the sample
    with them."""
    values = dataset.values
    iters, n_coords = values.shape
    per_coord = iters // seq_len
    if per_coord == 0:
        raise ValueError(f"need at least {seq_len} iterations of gradients")
    total = per_coord * n_coords
    n_take = min(total, int(max_scalars) // seq_len)
    pick = rng.choice(total, size=n_take, replace=False)
    out = np.empty((n_take, seq_len))
    for j, p in enumerate(pick):
        c, w = divmod(int(p), per_coord)
        out[j] = values[w * seq_len:(w + 1) * seq_len, c]
    out = out[~np.all(out == 0.0, axis=1)]
    if out.shape[0] == 0:
        raise ValueError("no live gradient windows to train on")
    return out


def identity_experiment(dataset, mode, epochs=1000, seed=0, lrs=None,
                        batch=256, seq_len=20, max_scalars=1_000_000,
                        eval_size=2048):
    """Train a small recurrent model to reproduce its own input.

    The model (LSTM hidden 8, then an MLP head [16, 16]) minimises the
    squared error between its per-step output and the target gradient;
    a prediction counts as correct when it falls within 10% of the
    target (bounds oriented by min/max, so negatives work).  Inputs are
    the raw gradients, their [sign, log] processing, or uniform random
    values of matched size.  The learning rate is picked from a fixed
    grid by best final accuracy.  One epoch is one Adam step on a fresh
    minibatch; accuracy is tracked on a fixed evaluation sample.

    Returns {mode, lr, loss, accuracy, final_accuracy}.
    """
    if mode not in IDENTITY_MODES:
        raise ValueError(f"mode must be one of {IDENTITY_MODES}")
    if dataset.count == 0:
        raise ValueError("empty gradient dataset")

    root = np.random.SeedSequence(seed)
    data_ss, model_ss, train_ss = root.spawn(3)
    data_rng = np.random.default_rng(data_ss)

    if mode == "random":
        n_win = min(int(max_scalars) // seq_len,
                    max(1, dataset.count // seq_len))
        target = data_rng.uniform(-1.0, 1.0, size=(n_win, seq_len))
    else:
        target = _make_windows(dataset, seq_len, max_scalars, data_rng)

    if mode == "processed":
        x = np.stack([np.sign(target),
                      np.log(np.abs(target) + optimizers.PROCESS_EPS)], axis=-1)
    else:
        x = target[..., None]

    n_win = target.shape[0]
    eval_idx = data_rng.choice(n_win, size=min(eval_size, n_win), replace=False)
    x_eval, t_eval = x[eval_idx], target[eval_idx]

    grid = IDENTITY_LR_GRID if lrs is None else tuple(np.atleast_1d(lrs))
    model_seed = int(np.random.default_rng(model_ss).integers(2**31))
    best = None
    for lr in grid:
        params = _identity_model_init(x.shape[-1], model_seed)
        opt_state = optimizers.init_classical_state("adam", params)
        train_rng = np.random.default_rng(train_ss)
        losses, accs = [], []
        for _ in range(epochs):
            mb = train_rng.integers(0, n_win, size=min(batch, n_win))
            params_t = nets.as_tensors(params)
            loss = _identity_loss(params_t, x[mb], target[mb])
            loss.backward()
            grads = {k: np.array(t.grad) for k, t in params_t.items()}
            updates, opt_state = optimizers.classical_update("adam", opt_state, grads, lr)
            params = {k: params[k] + updates[k] for k in params}
            losses.append(float(loss.data))
            accs.append(band_accuracy(_identity_forward_np(params, x_eval), t_eval))
        result = {"mode": mode, "lr": float(lr), "loss": losses,
                  "accuracy": accs, "final_accuracy": accs[-1]}
        if best is None or result["final_accuracy"] > best["final_accuracy"]:
            best = result
    return best


# ---------------------------------------------------------------------------
# training runs


@dataclasses.dataclass
class RunConfig:
    """Configuration of one agent training run."""

    env: str = "small_dense_short"
    optimizer: str = "adam"
    alpha: float = None
    seed: int = 0
    iterations: int = 5000
    eval_every: int = 100
    eval_episodes: int = 10
    checkpoint: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise ValueError(f"unknown environment {self.env!r}")
        if self.optimizer not in ALL_KINDS:
            raise ValueError(f"unknown optimizer kind {self.optimizer!r}")
        if self.alpha is None:
            self.alpha = default_alpha(self.env)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be positive")


def run_training(cfg):
    """Train one agent with a fixed optimizer; returns the metrics rows.

    Rows are (iteration, seed, env, optimizer, return, inner_loss), one
    per evaluation point.  When cfg.out_dir is set the rows stream to
    run.csv under it.
    """
    rows = []
    csv_file = None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        csv_file = open(os.path.join(cfg.out_dir, "run.csv"), "w")
        csv_file.write(RUN_CSV_HEADER + "\n")

    def on_eval(it, ret, loss):
        row = (it, cfg.seed, cfg.env, cfg.optimizer, ret, loss)
        rows.append(row)
        if csv_file is not None:
            csv_file.write(f"{it},{cfg.seed},{cfg.env},{cfg.optimizer},"
                           f"{ret!r},{loss!r}\n")

    try:
        _train_loop(cfg.env, cfg.optimizer, cfg.alpha, cfg.iterations, cfg.seed,
                    checkpoint=cfg.checkpoint or None,
                    eval_every=cfg.eval_every, eval_episodes=cfg.eval_episodes,
                    on_eval=on_eval)
    finally:
        if csv_file is not None:
            csv_file.close()
    return rows


# ---------------------------------------------------------------------------
# small CSV helpers (round-trip readers for the emitted files)


def write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(repr(x) if isinstance(x, float) else str(x)
                             for x in row) + "\n")


def read_csv(path):
    """Returns (header fields, rows as string lists)."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]
