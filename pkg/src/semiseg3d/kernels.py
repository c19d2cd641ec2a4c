"""Kernel dispatch: compiled Cython extension if importable, numpy/scipy otherwise.

Set ``SEMISEG3D_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
active implementation ("cython" or "python").
"""

import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("SEMISEG3D_PURE_PYTHON"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def stitch_accumulate(prob_sum, count, patches, origins, backend=None):
    """In-place: ``prob_sum[o:o+s] += patch`` and ``count[o:o+s] += 1`` per patch.

    ``prob_sum`` is float64 (H, W, D, K), ``count`` int64 (H, W, D), ``patches``
    float64 (N, s, s, s, K) and ``origins`` int64 (N, 3).
    """
    impl = _select(backend)
    impl.stitch_accumulate(
        prob_sum,
        count,
        np.ascontiguousarray(patches, dtype=np.float64),
        np.ascontiguousarray(origins, dtype=np.int64),
    )


def boundary_mask(mask, backend=None):
    """Boolean mask of foreground voxels touching background across a face."""
    impl = _select(backend)
    out = impl.boundary_mask(np.ascontiguousarray(mask, dtype=np.uint8))
    return np.asarray(out).astype(bool)


def edt_squared(features, spacing=(1.0, 1.0, 1.0), backend=None):
    """Squared distance in mm^2 to the nearest True voxel of ``features``."""
    impl = _select(backend)
    spacing = tuple(float(s) for s in spacing)
    return np.asarray(impl.edt_squared(np.ascontiguousarray(features, dtype=np.uint8), spacing))


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {backend!r}")
