"""Hot inner-loop kernels with a compiled core and a numpy fallback.

The compiled extension ``_cimpl`` is used when it was built; otherwise the
numpy implementation in ``_pyimpl`` is selected. Setting the environment
variable ``FUSIONVOTE_PURE_PYTHON=1`` forces the fallback.

Callers must look kernels up through this module at call time
(``kernels.im2col(...)``) so :func:`use_backend` takes effect.
"""

import os

from . import _pyimpl

try:
    from . import _cimpl
except ImportError:  # extension not built
    _cimpl = None

BACKENDS = {"python": _pyimpl}
if _cimpl is not None:
    BACKENDS["compiled"] = _cimpl

BACKEND = ""
im2col = col2im = warp_nearest = None


def use_backend(name: str) -> None:
    """Route kernel calls to ``"compiled"`` or ``"python"``."""
    global BACKEND, im2col, col2im, warp_nearest
    try:
        mod = BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {sorted(BACKENDS)}") from None
    BACKEND = name
    im2col = mod.im2col
    col2im = mod.col2im
    warp_nearest = mod.warp_nearest


if _cimpl is not None and os.environ.get("FUSIONVOTE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    use_backend("compiled")
else:
    use_backend("python")
