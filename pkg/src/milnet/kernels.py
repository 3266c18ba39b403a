"""Backend selection for the GRU recurrence kernels.

The compiled extension is used when it imports; setting the environment
variable ``MILNET_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from milnet import _gru_py

BACKEND = "python"

if os.environ.get("MILNET_PURE_PYTHON", "") not in ("", "0"):
    gru_forward_scan = _gru_py.gru_forward_scan
    gru_backward_scan = _gru_py.gru_backward_scan
else:
    try:
        from milnet._gru_ext import gru_backward_scan, gru_forward_scan
        BACKEND = "cython"
    except ImportError:
        gru_forward_scan = _gru_py.gru_forward_scan
        gru_backward_scan = _gru_py.gru_backward_scan

python_kernels = (_gru_py.gru_forward_scan, _gru_py.gru_backward_scan)
