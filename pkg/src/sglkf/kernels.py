"""Kernel dispatch: compiled extension when importable, numpy/Python otherwise.

Set ``SGLKF_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("SGLKF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

iou_matrix_2d = _impl.iou_matrix_2d
iou_matrix_3d = _impl.iou_matrix_3d
linear_sum_assignment = _impl.linear_sum_assignment

__all__ = ["BACKEND", "iou_matrix_2d", "iou_matrix_3d", "linear_sum_assignment"]
