"""Kernel backend selection.

The fused GRU/LSTM cell kernels exist twice: a compiled Cython extension
(_core) and a pure numpy reference (numpy_backend).  The extension is
used when importable; set OPTIM4RL_KERNELS=numpy to force the fallback
or OPTIM4RL_KERNELS=compiled to fail loudly when the extension is
missing.  Convolution is cheap at our scales and always runs on numpy.

Both backends share the gate packing documented in numpy_backend and
both are batch-size bit-stable: one call over n coordinates matches n
scalar calls bit for bit within the same backend.  Results may differ
across backends in the last few ulps.
"""

import os

from . import numpy_backend
from .numpy_backend import conv2d_backward, conv2d_forward

_requested = os.environ.get("OPTIM4RL_KERNELS", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise ValueError(f"OPTIM4RL_KERNELS must be auto, compiled or numpy, got {_requested!r}")

_impl = numpy_backend
_backend_name = "numpy"
if _requested in ("auto", "compiled"):
    try:
        from . import _core

        _impl = _core
        _backend_name = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise

gru_cell_forward = _impl.gru_cell_forward
gru_cell_backward = _impl.gru_cell_backward
lstm_cell_forward = _impl.lstm_cell_forward
lstm_cell_backward = _impl.lstm_cell_backward


def backend():
    """Name of the active kernel backend: 'compiled' or 'numpy'."""
    return _backend_name
