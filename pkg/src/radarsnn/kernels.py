"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``RADARSNN_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("RADARSNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name=None):
    return BACKENDS[name or BACKEND]


def event_conv3d(events, wt, out, stride, pad, backend=None):
    return get_backend(backend).event_conv3d(events, wt, out, *stride, *pad)
