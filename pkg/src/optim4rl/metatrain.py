"""Pipeline meta-training of learned optimizers over populations of agents.

A population of training units (agent + environment + optimizer hidden
state) runs A2C in lockstep.  Each meta iteration every unit takes a
short burst of inner updates whose weight chain stays on the tape, then
a validation rollout; the meta gradient of the mean validation actor
loss drives one Adam step on the optimizer parameters phi.

Units are reset on a staggered schedule so the population always covers
a spread of agent lifetimes: unit i restarts from scratch whenever the
inner-update count t satisfies t = r_i (mod m), with offsets r_i spread
evenly over the reset interval m.  Gradients are truncated at window
boundaries: weights and hidden banks carry over numerically, so each
meta step differentiates through its own window only.
"""

import dataclasses
import os
import pickle
import struct

import numpy as np

from . import nets, optimizers
from .agent import (
    ROLLOUT_STEPS,
    a2c_loss,
    actor_loss,
    init_agent_params,
    rollout,
)
from .autodiff import Tensor
from .gridworld import ENV_NAMES, make_env

CHECKPOINT_MAGIC = b"O4RLCKPT"
CHECKPOINT_VERSION = 1

# Per-env agent learning rates; envs without a tuned value get the
# conservative default.
DEFAULT_ALPHA = {"small_dense_short": 1e-2, "big_dense_long": 3e-3}
FALLBACK_ALPHA = 3e-3

METRICS_HEADER = "iteration,unit,return,inner_loss,outer_loss,grad_norm"


class _Diverged(Exception):
    """Internal signal: a unit produced a non-finite loss or gradient."""


@dataclasses.dataclass
class MetaTrainConfig:
    envs: tuple = ("small_dense_short",)
    n_units: int = 4
    optimizer: str = "optim4rl"
    inner_steps: int = 4
    reset_interval: int = 512
    meta_lr: float = 1e-4
    iterations: int = 1000
    seed: int = 0
    alpha: float = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.envs, (list, str)):
            self.envs = (self.envs,) if isinstance(self.envs, str) else tuple(self.envs)
        if not self.envs:
            raise ValueError("need at least one environment")
        for name in self.envs:
            if name not in ENV_NAMES:
                raise ValueError(f"unknown environment {name!r}")
        if self.optimizer not in optimizers.LEARNED_KINDS:
            raise ValueError(f"cannot meta-train optimizer kind {self.optimizer!r}")
        if self.n_units < 1:
            raise ValueError("n_units must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be positive")
        if self.meta_lr <= 0:
            raise ValueError("meta_lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclasses.dataclass
class TrainingUnit:
    """One member of the population: an agent training in its own env."""

    uid: int
    env_name: str
    config: object
    alpha: float
    offset: int
    theta: dict
    bank: object
    state: object = None
    iteration: int = 0
    last_reset: int = None
    diverged: bool = False
    rng: object = None
    reset_rng: object = None


@dataclasses.dataclass
class WindowRecord:
    """Everything needed to replay one unit's window as a function of phi.

    Inner gradients, the validation trajectory and the starting weights
    and bank are pinned to their recorded values, so the replayed outer
    loss varies only through the optimizer updates.
    """

    uid: int
    alpha: float
    theta0: dict
    bank0: object
    g_list: list
    val_traj: object = None
    mid_reset: bool = False


def pipeline_offsets(n, m):
    """Evenly spread reset offsets r_i over an interval of m iterations.

    r_i = round((i - 1)(m - 1)/(n - 1)) for i = 1..n with half-up
    rounding, so n units reset at maximally staggered times mod m.
    """
    if n < 1:
        raise ValueError("need at least one unit")
    if m < n:
        raise ValueError(f"reset interval {m} shorter than unit count {n}")
    if n == 1:
        return [0]
    return [int(np.floor(i * (m - 1) / (n - 1) + 0.5)) for i in range(n)]


def _resolve_alpha(cfg, env_name):
    if cfg.alpha is not None:
        return float(cfg.alpha)
    return DEFAULT_ALPHA.get(env_name, FALLBACK_ALPHA)


def _reset_unit(unit, t):
    """Fresh agent weights, fresh episode, zeroed optimizer state."""
    seed = int(unit.reset_rng.integers(2**31))
    unit.theta = init_agent_params(unit.config, seed)
    unit.bank = unit.bank.detach()
    unit.bank.h1[...] = 0.0
    if unit.bank.h2 is not None:
        unit.bank.h2[...] = 0.0
    unit.state = None
    unit.last_reset = t
    unit.diverged = False


def maybe_reset(unit, t, m):
    """Restart the unit if its pipeline slot matches t (or it diverged)."""
    if unit.diverged or t % m == unit.offset:
        _reset_unit(unit, t)
        return True
    return False


def make_units(cfg, kind=None):
    """Build the unit population, round-robin over cfg.envs.

    Every unit owns two private rng streams (environment/actions and
    reset seeds), so results do not depend on the order units are
    processed in.
    """
    kind = kind or cfg.optimizer
    offsets = pipeline_offsets(cfg.n_units, cfg.reset_interval)
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.n_units + 1)[1:]
    units = []
    for uid in range(cfg.n_units):
        env_name = cfg.envs[uid % len(cfg.envs)]
        config = make_env(env_name)
        env_ss, reset_ss = children[uid].spawn(2)
        rng = np.random.default_rng(env_ss)
        reset_rng = np.random.default_rng(reset_ss)
        theta = init_agent_params(config, int(reset_rng.integers(2**31)))
        bank = optimizers.init_bank(kind, nets.tree_size(theta))
        units.append(TrainingUnit(
            uid=uid,
            env_name=env_name,
            config=config,
            alpha=_resolve_alpha(cfg, env_name),
            offset=offsets[uid],
            theta=theta,
            bank=bank,
            rng=rng,
            reset_rng=reset_rng,
        ))
    return units


def init_phi(cfg):
    """Optimizer parameters, seeded from the same root as the units."""
    root = np.random.SeedSequence(cfg.seed)
    phi_ss = root.spawn(1)[0]
    return optimizers.init_learned_params(cfg.optimizer, phi_ss)


def inner_update(unit, theta_t, bank_t, update_fn):
    """One agent update whose new weights stay differentiable in phi.

    Rolls out under the current numeric weights, backprops the A2C loss
    to get inner gradients (taken as data: the meta gradient does not
    flow through them), then applies the learned update so theta_{k+1}
    keeps its tape dependence on the optimizer parameters.

    Returns (theta', bank', trajectory, loss value, gradient tree).
    Raises on non-finite loss or gradients so the caller can flag the
    unit as diverged.
    """
    theta_np = {k: np.asarray(t.data) for k, t in theta_t.items()}
    traj, unit.state = rollout(unit.config, unit.state, theta_np, ROLLOUT_STEPS, unit.rng)
    loss = a2c_loss(traj, theta_t)
    if not np.isfinite(loss.data).all():
        raise _Diverged(f"unit {unit.uid}: non-finite inner loss")
    loss.backward()
    grads = {k: np.array(t.grad) for k, t in theta_t.items()}
    for g in grads.values():
        if not np.isfinite(g).all():
            raise _Diverged(f"unit {unit.uid}: non-finite inner gradient")
    updates, bank_new = nets.coordinatewise_apply(update_fn, grads, bank_t, unit.alpha)
    theta_new = {k: theta_t[k] + updates[k] for k in theta_t}
    return theta_new, bank_new, traj, float(loss.data), grads


def meta_step(units, phi, meta_state, cfg, record=None):
    """One truncated-window meta update.

    Every unit runs cfg.inner_steps inner updates (resetting on schedule)
    followed by a validation rollout; the mean validation actor loss over
    surviving units, accumulated in uid order, is differentiated w.r.t.
    phi and fed to Adam.  Weights and banks carry across windows as
    numbers only.  A non-finite meta gradient skips the update.

    Returns (phi', meta_state', metrics).  If `record` is a list, one
    WindowRecord per surviving unit is appended for replay.
    """
    phi_t = nets.as_tensors(phi)
    update_fn = optimizers.make_update_fn(cfg.optimizer, phi_t)
    m = cfg.reset_interval

    outer_terms = []
    metrics = {
        "unit_return": {},
        "unit_inner_loss": {},
        "resets": 0,
        "diverged": [],
        "skipped": False,
        "outer_loss": float("nan"),
        "grad_norm": float("nan"),
        "grad": None,
    }

    for unit in sorted(units, key=lambda u: u.uid):
        if maybe_reset(unit, unit.iteration, m):
            metrics["resets"] += 1
        theta_t = nets.as_tensors(unit.theta)
        bank_t = unit.bank.tensorize()
        rec = WindowRecord(
            uid=unit.uid,
            alpha=unit.alpha,
            theta0={k: np.array(v) for k, v in unit.theta.items()},
            bank0=unit.bank.detach(),
            g_list=[],
        )
        inner_losses = []
        returns = []
        try:
            for k in range(cfg.inner_steps):
                if k > 0 and maybe_reset(unit, unit.iteration, m):
                    metrics["resets"] += 1
                    rec.mid_reset = True
                    theta_t = nets.as_tensors(unit.theta)
                    bank_t = unit.bank.tensorize()
                theta_t, bank_t, traj, loss_val, grads = inner_update(
                    unit, theta_t, bank_t, update_fn)
                unit.iteration += 1
                inner_losses.append(loss_val)
                returns.append(float(traj.rewards.sum()))
                rec.g_list.append(grads)
            theta_np = {k: np.asarray(t.data) for k, t in theta_t.items()}
            val_traj, unit.state = rollout(
                unit.config, unit.state, theta_np, ROLLOUT_STEPS, unit.rng)
            rec.val_traj = val_traj
            outer_terms.append(actor_loss(val_traj, theta_t))
        except _Diverged:
            unit.diverged = True
            metrics["diverged"].append(unit.uid)
            continue
        finally:
            metrics["unit_inner_loss"][unit.uid] = (
                float(np.mean(inner_losses)) if inner_losses else float("nan"))
            metrics["unit_return"][unit.uid] = (
                float(np.mean(returns)) if returns else float("nan"))
        unit.theta = {k: np.array(t.data) for k, t in theta_t.items()}
        unit.bank = bank_t.detach()
        if record is not None:
            record.append(rec)

    if not outer_terms:
        metrics["skipped"] = True
        return phi, meta_state, metrics

    total = outer_terms[0]
    for term in outer_terms[1:]:
        total = total + term
    mean_outer = total * (1.0 / len(outer_terms))
    mean_outer.backward()
    phi_grads = {k: np.array(t.grad) for k, t in phi_t.items()}
    flat, _ = nets.tree_flatten(phi_grads)

    metrics["outer_loss"] = float(mean_outer.data)
    metrics["grad"] = phi_grads
    if not np.isfinite(flat).all():
        metrics["skipped"] = True
        return phi, meta_state, metrics
    metrics["grad_norm"] = float(np.linalg.norm(flat))

    updates, meta_state = optimizers.classical_update(
        "adam", meta_state, phi_grads, cfg.meta_lr)
    phi_new = {k: phi[k] + updates[k] for k in phi}
    return phi_new, meta_state, metrics


def replay_outer_loss(phi, records, kind):
    """Recompute the mean validation actor loss from recorded windows.

    Rollouts, inner gradients and starting state are pinned, so the
    result is a pure function of phi: numeric trees give a float (for
    finite-difference probes), Tensor trees give a tape scalar whose
    gradient matches the live meta gradient at the recorded phi.
    """
    tape = isinstance(next(iter(phi.values())), Tensor)
    update_fn = optimizers.make_update_fn(kind, phi)
    terms = []
    for rec in sorted(records, key=lambda r: r.uid):
        if rec.mid_reset:
            raise ValueError("window saw a mid-window reset; cannot replay")
        if tape:
            theta = nets.as_tensors(rec.theta0)
            bank = rec.bank0.tensorize()
        else:
            theta = {k: np.array(v) for k, v in rec.theta0.items()}
            bank = rec.bank0.detach()
        for g in rec.g_list:
            updates, bank = nets.coordinatewise_apply(update_fn, g, bank, rec.alpha)
            theta = {k: theta[k] + updates[k] for k in theta}
        loss = actor_loss(rec.val_traj, theta if tape else nets.as_tensors(theta))
        terms.append(loss)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    mean = total * (1.0 / len(terms))
    return mean if tape else float(mean.data)


def save_checkpoint(path, phi, meta_state, units, cfg, iteration):
    """Versioned binary snapshot of the full meta-training state."""
    payload = {
        "phi": phi,
        "meta_state": meta_state,
        "units": units,
        "config": dataclasses.asdict(cfg),
        "iteration": iteration,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<i", CHECKPOINT_VERSION))
        pickle.dump(payload, f, protocol=4)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a meta-training checkpoint")
        (version,) = struct.unpack("<i", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return pickle.load(f)


def meta_train(cfg, out_dir=None, log_every=1):
    """Run the full meta-training loop.

    Streams per-unit metrics rows to metrics.csv under out_dir (if
    given) and writes a final checkpoint there.  Returns
    (phi, meta_state, units, history) where history is the list of
    per-iteration metrics dicts (without the raw gradient trees).
    """
    units = make_units(cfg)
    phi = init_phi(cfg)
    meta_state = optimizers.init_classical_state("adam", phi)
    history = []
    skipped = 0

    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "metrics.csv"), "w")
        csv_file.write(METRICS_HEADER + "\n")

    try:
        for it in range(cfg.iterations):
            phi, meta_state, metrics = meta_step(units, phi, meta_state, cfg)
            if metrics["skipped"]:
                skipped += 1
            metrics = {k: v for k, v in metrics.items() if k != "grad"}
            metrics["iteration"] = it
            metrics["skipped_total"] = skipped
            history.append(metrics)
            if csv_file is not None and it % log_every == 0:
                for uid in sorted(metrics["unit_return"]):
                    row = (it, uid, metrics["unit_return"][uid],
                           metrics["unit_inner_loss"][uid],
                           metrics["outer_loss"], metrics["grad_norm"])
                    csv_file.write(",".join(repr(x) for x in row) + "\n")
                csv_file.flush()
            if (cfg.checkpoint_every and out_dir is not None
                    and (it + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                                phi, meta_state, units, cfg, it + 1)
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                        phi, meta_state, units, cfg, cfg.iterations)
    return phi, meta_state, units, history
