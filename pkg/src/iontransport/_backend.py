"""Select the trajectory kernel: compiled if available, else pure Python.

Set ``IONTRANSPORT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

NAME = "python"
integrate = _pykernels.integrate

if not os.environ.get("IONTRANSPORT_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:
        _kernels = None
    if _kernels is not None:
        integrate = _kernels.integrate
        NAME = "compiled"

STATUS_OK, STATUS_ESCAPED, STATUS_COLLIDED, STATUS_MAX_STEPS, STATUS_STEP_FLOOR = range(5)


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
