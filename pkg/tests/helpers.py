"""Shared finite-difference machinery for the gradient tests.

Central differences on a scalar loss, compared coordinate-by-coordinate
against the tape gradient.  Coordinates are sampled among those whose
tape gradient clears a small floor: below it the difference quotient is
dominated by cancellation noise and comparing it to anything measures
nothing.
"""

import numpy as np

from optim4rl import nets
from optim4rl.autodiff import Tensor

GRAD_FLOOR = 1e-6


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def numeric_loss(loss_fn, params):
    out = loss_fn(nets.as_tensors(params))
    return float(out.data if isinstance(out, Tensor) else out)


def tape_grads(loss_fn, params):
    params_t = nets.as_tensors(params)
    loss = loss_fn(params_t)
    loss.backward()
    return {k: np.array(t.grad) for k, t in params_t.items()}


def fd_grad(loss_fn, params, path, idx, eps):
    """Central difference of loss_fn along one scalar coordinate."""
    bumped = {k: np.array(v) for k, v in params.items()}
    bumped[path].flat[idx] += eps
    hi = numeric_loss(loss_fn, bumped)
    bumped[path].flat[idx] -= 2 * eps
    lo = numeric_loss(loss_fn, bumped)
    return (hi - lo) / (2 * eps)


def gradcheck(loss_fn, params, n_coords=100, eps=1e-4, seed=0,
              floor=GRAD_FLOOR):
    """Max relative error of tape vs central-difference gradients.

    Samples n_coords coordinates uniformly among those with
    |tape gradient| >= floor and returns (max_rel_err, n_checked).
    """
    grads = tape_grads(loss_fn, params)
    coords = [(path, i)
              for path in sorted(params)
              for i in range(grads[path].size)
              if abs(grads[path].flat[i]) >= floor]
    assert coords, "no coordinate clears the gradient floor"
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in pick]
    worst = 0.0
    for path, i in coords:
        fd = fd_grad(loss_fn, params, path, i, eps)
        worst = max(worst, rel_err(fd, grads[path].flat[i]))
    return worst, len(coords)
