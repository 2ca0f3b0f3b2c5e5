"""Object-collection gridworlds.

Six fixed configurations spanning small/big grids, dense/sparse rewards
and short/long horizons.  An object is a triple [r, eps_term,
eps_respawn]: collecting it yields reward r, ends the episode with
probability eps_term, and once collected it reappears at a random free
cell with probability eps_respawn on each later step.

Observations are binary (N+1, H, W) arrays: one channel per object (all
zeros while the object is collected) plus one channel marking the agent.
The agent channel is an addition over the plain N-channel object view; a
memoryless policy is blind without it.

The nine actions are the eight neighbouring cells plus staying put,
encoded as action = 3*(dr+1) + (dc+1); moves into a wall clamp.
"""

from dataclasses import dataclass

import numpy as np

N_ACTIONS = 9

ENV_NAMES = (
    "small_dense_short",
    "small_dense_long",
    "big_sparse_short",
    "big_sparse_long",
    "big_dense_short",
    "big_dense_long",
)


@dataclass(frozen=True)
class ObjectSpec:
    reward: float
    eps_term: float
    eps_respawn: float

    def __post_init__(self):
        if not (0.0 <= self.eps_term <= 1.0 and 0.0 <= self.eps_respawn <= 1.0):
            raise ValueError("object probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class GridworldConfig:
    name: str
    height: int
    width: int
    objects: tuple
    horizon: int

    def __post_init__(self):
        if self.height * self.width <= len(self.objects) + 1:
            raise ValueError("grid too small for the agent plus all objects")

    @property
    def n_objects(self):
        return len(self.objects)

    @property
    def obs_shape(self):
        return (len(self.objects) + 1, self.height, self.width)


def _cfg(name, h, w, objects, horizon):
    return GridworldConfig(name, h, w, tuple(ObjectSpec(*o) for o in objects), horizon)


_ENVS = {
    "small_dense_short": _cfg("small_dense_short", 4, 6, [(100.0, 0.0, 0.5), (-100.0, 0.5, 0.5)], 50),
    "small_dense_long": _cfg("small_dense_long", 6, 4, [(1000.0, 0.0, 0.5), (-1000.0, 0.5, 0.5)], 500),
    "big_sparse_short": _cfg(
        "big_sparse_short",
        10,
        12,
        [(100.0, 0.0, 0.05), (100.0, 0.0, 0.05), (-100.0, 0.5, 0.05), (-100.0, 0.5, 0.05)],
        50,
    ),
    "big_sparse_long": _cfg(
        "big_sparse_long",
        12,
        10,
        [(10.0, 0.0, 0.05), (10.0, 0.0, 0.05), (-10.0, 0.5, 0.05), (-10.0, 0.5, 0.05)],
        500,
    ),
    "big_dense_short": _cfg(
        "big_dense_short",
        9,
        13,
        [(10.0, 0.0, 0.5), (10.0, 0.0, 0.5), (-10.0, 0.5, 0.5), (-10.0, 0.5, 0.5)],
        50,
    ),
    "big_dense_long": _cfg(
        "big_dense_long",
        13,
        9,
        [(1.0, 0.0, 0.5), (1.0, 0.0, 0.5), (-1.0, 0.5, 0.5), (-1.0, 0.5, 0.5)],
        500,
    ),
}


def make_env(name):
    """Return the configuration for one of the six fixed gridworlds."""
    try:
        return _ENVS[name]
    except KeyError:
        raise ValueError(f"unknown gridworld {name!r}; choose from {', '.join(ENV_NAMES)}") from None


@dataclass
class GridworldState:
    config: GridworldConfig
    rng: np.random.Generator
    agent: tuple
    # object_pos[i] is a (row, col) tuple, or None while collected
    object_pos: list
    t: int = 0
    terminated: bool = False
    truncated: bool = False

    @property
    def done(self):
        return self.terminated or self.truncated


def observe(state):
    """Binary (N+1, H, W) observation of the current state."""
    cfg = state.config
    obs = np.zeros(cfg.obs_shape)
    for i, pos in enumerate(state.object_pos):
        if pos is not None:
            obs[i, pos[0], pos[1]] = 1.0
    obs[cfg.n_objects, state.agent[0], state.agent[1]] = 1.0
    return obs


def reset(config, rng):
    """Place the agent and every object on distinct uniform cells; t = 0."""
    cells = rng.choice(config.height * config.width, size=config.n_objects + 1, replace=False)
    agent = (int(cells[0]) // config.width, int(cells[0]) % config.width)
    object_pos = [(int(c) // config.width, int(c) % config.width) for c in cells[1:]]
    state = GridworldState(config=config, rng=rng, agent=agent, object_pos=object_pos)
    return state, observe(state)


def step(state, action):
    """Advance one time-step; returns (state, observation, reward, done).

    Order within a step: collected objects get their respawn draw first,
    then the agent moves, then any object on the landing cell is
    collected.  An object collected now gets its first respawn chance on
    the next step.  The state is advanced in place and returned.
    """
    if state.done:
        raise RuntimeError("step() called on a finished episode; reset first")
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"action must be in 0..8, got {action}")
    cfg = state.config
    rng = state.rng

    for i, spec in enumerate(cfg.objects):
        if state.object_pos[i] is None and rng.random() < spec.eps_respawn:
            occupied = {state.agent} | {p for p in state.object_pos if p is not None}
            free = [
                (r, c)
                for r in range(cfg.height)
                for c in range(cfg.width)
                if (r, c) not in occupied
            ]
            state.object_pos[i] = free[int(rng.integers(len(free)))]

    dr, dc = action // 3 - 1, action % 3 - 1
    state.agent = (
        min(max(state.agent[0] + dr, 0), cfg.height - 1),
        min(max(state.agent[1] + dc, 0), cfg.width - 1),
    )

    reward = 0.0
    for i, spec in enumerate(cfg.objects):
        if state.object_pos[i] == state.agent:
            reward = spec.reward
            state.object_pos[i] = None
            if rng.random() < spec.eps_term:
                state.terminated = True
            break

    state.t += 1
    if state.t >= cfg.horizon and not state.terminated:
        state.truncated = True
    return state, observe(state), reward, state.done
