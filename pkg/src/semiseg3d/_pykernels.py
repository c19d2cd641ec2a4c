"""Pure numpy/scipy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np
from scipy import ndimage


def stitch_accumulate(prob_sum, count, patches, origins):
    s0, s1, s2 = patches.shape[1:4]
    if origins.shape[0] != patches.shape[0]:
        raise ValueError("one origin per patch required")
    if prob_sum.shape[3] != patches.shape[4]:
        raise ValueError("channel count mismatch")
    for patch, (x, y, z) in zip(patches, origins):
        prob_sum[x:x + s0, y:y + s1, z:z + s2] += patch
        count[x:x + s0, y:y + s1, z:z + s2] += 1


def boundary_mask(mask):
    fg = mask.astype(bool)
    # Pad with background so the volume border counts as outside.
    padded = np.pad(fg, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return (fg & ~interior).astype(np.uint8)


def edt_squared(features, spacing):
    features = np.asarray(features).astype(bool)
    if not features.any():
        return np.full(features.shape, np.inf)
    dist = ndimage.distance_transform_edt(~features, sampling=tuple(float(s) for s in spacing))
    return dist.astype(np.float64) ** 2
