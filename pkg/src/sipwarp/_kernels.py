"""Select the compiled kernels when available, else the numpy fallback.

Set ``SIPWARP_PURE=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("SIPWARP_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

grouped_max_sq = _impl.grouped_max_sq
# the blocked numpy projection (one BLAS product per class) beats the
# compiled loop for realistic widths, so both backends share it
two_column_project = _fallback.two_column_project
compiled_two_column_project = getattr(_impl, "two_column_project", None)
two_column_adjoint = _impl.two_column_adjoint
