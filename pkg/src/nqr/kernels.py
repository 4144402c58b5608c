"""Hot-loop kernels with a compiled backend selected at import.

The Cython extension ``nqr._kernels`` is used when it was built; otherwise
the numpy implementations in ``nqr._kernels_py`` are used.  Setting
``NQR_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("NQR_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

bilinear_sample = _impl.bilinear_sample
mog_update = _impl.mog_update

__all__ = ["BACKEND", "bilinear_sample", "mog_update"]
