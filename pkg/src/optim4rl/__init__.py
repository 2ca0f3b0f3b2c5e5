"""Desk-scale lab for meta-learned optimizers on gridworld RL.

Layout:
  autodiff    tape-based reverse-mode differentiation over float64 arrays
  kernels     fused recurrent-cell / convolution kernels (compiled or numpy)
  nets        MLP / GRU / LSTM / conv blocks, parameter trees, batching
  gridworld   the six object-collection environments
  agent       A2C rollouts, lambda-return targets, losses
  optimizers  classical rules plus the learned gradient-processing optimizers
  metatrain   bilevel meta-training with pipelined agent resets
  experiments gradient collection, identity-fit diagnostic, training runs
  cli         command-line entry points
"""

from .autodiff import (
    Tensor,
    ShapeMismatch,
    as_tensor,
    evaluate,
    backward,
    stop_gradient,
    straight_through_binary_sign,
)

__version__ = "0.1.0"
