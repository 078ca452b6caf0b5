"""Pick the tile-pass kernel: compiled if importable, numpy otherwise.

Set ``STA_PURE_PYTHON=1`` to force the numpy kernel.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

KERNELS = {"python": _kernels_py.run_pass}

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None
else:
    KERNELS["cython"] = _kernels.run_pass

if os.environ.get("STA_PURE_PYTHON") or _kernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"
log.debug("dmme kernel backend: %s", BACKEND)

run_pass = KERNELS[BACKEND]


def get_kernel(name=None):
    return KERNELS[name or BACKEND]
