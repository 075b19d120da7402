"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_pykernels`` take over.  Set ``AFFECTSYNTH_PURE_PYTHON=1``
to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
rasterize_triangles = _pykernels.rasterize_triangles
ward_merges = _pykernels.ward_merges

if os.environ.get("AFFECTSYNTH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        rasterize_triangles = _ckernels.rasterize_triangles
        ward_merges = _ckernels.ward_merges


def backends():
    """All importable backends as ``{name: module}``."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
