"""A2C agent: networks, rollouts, lambda-return targets, losses.

The same parameters drive two code paths.  Rollouts are numeric (no
tape): actions are sampled, nothing is differentiated, and the value
estimates needed for bootstrapping are recorded as plain floats.  The
losses rebuild logits and values on the tape from the stored
observations, so gradients flow only through the current parameters
while targets and advantages stay fixed data.

Feature nets follow the two gridworld families: a width-32 ReLU layer
for the small grids, and a 16-feature kernel-2 convolution followed by
a width-32 ReLU layer for the big ones.  Both heads are affine.
"""

from dataclasses import dataclass

import numpy as np

from . import nets
from .autodiff import Tensor, log_softmax, select
from .gridworld import N_ACTIONS, observe, reset, step

GAMMA = 0.995
LAMBDA = 0.95
ROLLOUT_STEPS = 20
CRITIC_WEIGHT = 0.5
ENTROPY_WEIGHT = 0.01


@dataclass
class Trajectory:
    """A fixed-length batch of environment steps.

    values / values_next hold v(S_t) and v(S_{t+1}) under the parameters
    that collected the data; values_next at index t is the value of the
    episode's own successor state (the pre-reset state when the episode
    ended there), so the return recursion never peeks across a reset.
    """

    obs: np.ndarray          # (T, N+1, H, W)
    actions: np.ndarray      # (T,) int
    rewards: np.ndarray      # (T,)
    terminated: np.ndarray   # (T,) bool
    truncated: np.ndarray    # (T,) bool
    logp: np.ndarray         # (T,)
    values: np.ndarray       # (T,)
    values_next: np.ndarray  # (T,)

    @property
    def bootstrap_value(self):
        return self.values_next[-1]

    def __len__(self):
        return self.obs.shape[0]


def is_small_world(config):
    return config.name.startswith("small")


def init_agent_params(config, seed):
    """Parameter tree for one agent on one gridworld."""
    ss = np.random.SeedSequence(seed).spawn(4)
    n_in = int(np.prod(config.obs_shape))
    params = {}
    if is_small_world(config):
        feat = nets.init_params("mlp", [n_in, 32], ss[0])
        feat_out = 32
    else:
        conv = nets.init_params("conv", (config.obs_shape[0], 16, 2), ss[0])
        params.update({f"conv/{k}": v for k, v in conv.items()})
        conv_out = 16 * (config.height - 1) * (config.width - 1)
        feat = nets.init_params("mlp", [conv_out, 32], ss[3])
        feat_out = 32
    params.update({f"feat/{k}": v for k, v in feat.items()})
    params.update({f"actor/{k}": v for k, v in nets.init_params("mlp", [feat_out, N_ACTIONS], ss[1]).items()})
    params.update({f"critic/{k}": v for k, v in nets.init_params("mlp", [feat_out, 1], ss[2]).items()})
    return params


def agent_apply(params, obs):
    """Tape-mode forward pass: obs (B, C, H, W) -> (logits (B, 9), values (B,))."""
    small = "conv/w" not in params
    if small:
        x = obs.reshape(obs.shape[0], -1)
    else:
        x = nets.conv2d_apply(nets.subtree(params, "conv/"), obs)
    feat = nets.mlp_apply(nets.subtree(params, "feat/"), x).relu()
    logits = nets.mlp_apply(nets.subtree(params, "actor/"), feat)
    values = nets.mlp_apply(nets.subtree(params, "critic/"), feat).reshape(-1)
    return logits, values


def agent_apply_np(params, obs):
    """Numeric twin of agent_apply for rollouts."""
    small = "conv/w" not in params
    if small:
        x = obs.reshape(obs.shape[0], -1)
    else:
        x = nets.conv2d_apply_np(nets.subtree(params, "conv/"), obs)
    feat = np.maximum(nets.mlp_apply_np(nets.subtree(params, "feat/"), x), 0.0)
    logits = nets.mlp_apply_np(nets.subtree(params, "actor/"), feat)
    values = nets.mlp_apply_np(nets.subtree(params, "critic/"), feat).reshape(-1)
    return logits, values


def _log_softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def rollout(config, state, params, n_steps, rng):
    """Collect a fixed-length trajectory, auto-resetting on episode end.

    state may be None to start a fresh episode from `rng`.  Actions are
    drawn by inverse CDF from the softmax policy so a fixed rng stream
    reproduces the trajectory bit for bit.  Returns (Trajectory, state).
    """
    if state is None:
        state, obs = reset(config, rng)
    else:
        obs = observe(state)

    T = n_steps
    obs_buf = np.empty((T,) + config.obs_shape)
    actions = np.empty(T, dtype=np.int64)
    rewards = np.empty(T)
    terminated = np.zeros(T, dtype=bool)
    truncated = np.zeros(T, dtype=bool)
    logps = np.empty(T)
    values = np.empty(T)
    values_next = np.empty(T)

    logits, v = agent_apply_np(params, obs[None])
    for t in range(T):
        obs_buf[t] = obs
        lp = _log_softmax_np(logits[0])
        probs = np.exp(lp)
        u = rng.random()
        a = int(np.searchsorted(np.cumsum(probs), u))
        a = min(a, N_ACTIONS - 1)
        actions[t] = a
        logps[t] = lp[a]
        values[t] = v[0]

        state, obs, r, done = step(state, a)
        rewards[t] = r
        logits, v = agent_apply_np(params, obs[None])
        values_next[t] = v[0]
        if done:
            terminated[t] = state.terminated
            truncated[t] = state.truncated
            state, obs = reset(config, state.rng)
            logits, v = agent_apply_np(params, obs[None])

    return (
        Trajectory(obs_buf, actions, rewards, terminated, truncated, logps, values, values_next),
        state,
    )


def lambda_returns(traj, gamma=GAMMA, lam=LAMBDA):
    """Backward lambda-return recursion over one trajectory.

    G_t = R_{t+1} + gamma * [(1-lam) v(S_{t+1}) + lam G_{t+1}], with the
    continuation value replaced by 0 at a true termination and by
    v(S_{t+1}) at a truncation (and at the rollout tail, which is a
    truncation of the computation, not of the episode).  Returns a plain
    array: targets are fixed data by construction.
    """
    T = len(traj)
    targets = np.empty(T)
    g = traj.values_next[T - 1]
    for t in range(T - 1, -1, -1):
        if traj.terminated[t]:
            cont = 0.0
        elif traj.truncated[t] or t == T - 1:
            cont = traj.values_next[t]
        else:
            cont = (1.0 - lam) * traj.values_next[t] + lam * g
        g = traj.rewards[t] + gamma * cont
        targets[t] = g
    return targets


def a2c_loss(traj, params, gamma=GAMMA, lam=LAMBDA, critic_weight=CRITIC_WEIGHT,
             entropy_weight=ENTROPY_WEIGHT, targets=None):
    """Full A2C loss on the tape (the inner loss).

    L = -mean(adv * log pi) + critic_weight * mean((G - v)^2)
        - entropy_weight * mean(H[pi])
    with adv = G - v held fixed (it is built from recorded values, so no
    gradient flows through it).  `targets` may be passed to pin the
    return targets externally; by default they come from lambda_returns.
    """
    if targets is None:
        targets = lambda_returns(traj, gamma, lam)
    adv = targets - traj.values

    logits, values = agent_apply(params, Tensor(traj.obs))
    lp_all = log_softmax(logits)
    logp = select(lp_all, traj.actions)
    actor = -(Tensor(adv) * logp).mean()
    delta = Tensor(targets) - values
    critic = (delta * delta).mean()
    entropy = -(lp_all.exp() * lp_all).sum(axis=1).mean()
    return actor + critic_weight * critic - entropy_weight * entropy


def actor_loss(traj, params, gamma=GAMMA, lam=LAMBDA, targets=None):
    """Actor term alone (the outer loss), advantages fixed as in a2c_loss."""
    if targets is None:
        targets = lambda_returns(traj, gamma, lam)
    adv = targets - traj.values
    logits, _ = agent_apply(params, Tensor(traj.obs))
    logp = select(log_softmax(logits), traj.actions)
    return -(Tensor(adv) * logp).mean()
