"""Sliding-window patch grids, extraction and probability-averaging stitching."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, GeometryError


@dataclass(frozen=True)
class PatchGrid:
    volume_shape: tuple
    patch_side: int
    stride: int
    origins: np.ndarray  # (N, 3) int64, lexicographic

    def __len__(self):
        return len(self.origins)


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, s, s, s, M)
    origins: np.ndarray  # (N, 3)


def axis_origins(extent: int, patch_side: int, stride: int) -> list[int]:
    """0, r, 2r, ... plus a clamped ``extent - s`` when the stride misses it."""
    last = extent - patch_side
    origins = list(range(0, last + 1, stride))
    if last % stride:
        origins.append(last)
    return origins


def plan_grid(volume_shape, patch_side: int = 32, stride: int = 8) -> PatchGrid:
    shape = tuple(int(n) for n in volume_shape[:3])
    if patch_side < 1 or stride < 1:
        raise GeometryError("patch_side and stride must be positive")
    if stride > patch_side:
        raise GeometryError(f"stride {stride} > patch side {patch_side} leaves voxels uncovered")
    if any(n < patch_side for n in shape):
        raise GeometryError(f"volume {shape} is smaller than patch side {patch_side}")
    per_axis = [axis_origins(n, patch_side, stride) for n in shape]
    origins = np.array(list(itertools.product(*per_axis)), dtype=np.int64).reshape(-1, 3)
    return PatchGrid(shape, patch_side, stride, origins)


def extract(volume, grid: PatchGrid) -> PatchSet:
    """Copy out every grid patch of a (H, W, D, M) array in grid order."""
    arr = getattr(volume, "intensities", volume)
    arr = np.asarray(arr)
    if tuple(arr.shape[:3]) != tuple(grid.volume_shape):
        raise ContractError(f"grid planned for {grid.volume_shape}, volume is {arr.shape[:3]}")
    s = grid.patch_side
    patches = np.stack([arr[x:x + s, y:y + s, z:z + s] for x, y, z in grid.origins])
    return PatchSet(patches, grid.origins.copy())


class StitchAccumulator:
    """Running per-voxel probability sums and coverage counts.

    Partial accumulators over disjoint patch subsets can be combined with
    ``merge``; the result does not depend on how patches were split.
    """

    def __init__(self, volume_shape, num_classes: int):
        self.prob_sum = np.zeros(tuple(volume_shape[:3]) + (num_classes,), dtype=np.float64)
        self.count = np.zeros(tuple(volume_shape[:3]), dtype=np.int64)

    def add(self, patch_probs, origins):
        patch_probs = np.asarray(patch_probs, dtype=np.float64)
        if patch_probs.ndim == 4:
            patch_probs = patch_probs[None]
            origins = np.asarray(origins).reshape(1, 3)
        side = patch_probs.shape[1:4]
        origins = np.asarray(origins, dtype=np.int64)
        if np.any(origins < 0) or np.any(origins + np.array(side) > np.array(self.count.shape)):
            raise GeometryError("patch falls outside the volume")
        kernels.stitch_accumulate(self.prob_sum, self.count, patch_probs, origins)

    def merge(self, other: "StitchAccumulator"):
        self.prob_sum += other.prob_sum
        self.count += other.count
        return self

    def result(self):
        """``(probabilities, labels)``; argmax ties go to the lowest class."""
        if np.any(self.count == 0):
            raise GeometryError("some voxels are not covered by any patch")
        probs = self.prob_sum / self.count[..., None]
        return probs, np.argmax(probs, axis=-1)


def stitch(patch_probs, grid: PatchGrid):
    """Average per-patch class probabilities (N, s, s, s, K) back onto the volume."""
    patch_probs = np.asarray(patch_probs)
    if len(patch_probs) != len(grid):
        raise ContractError(f"{len(patch_probs)} patches for a grid of {len(grid)}")
    acc = StitchAccumulator(grid.volume_shape, patch_probs.shape[-1])
    acc.add(patch_probs, grid.origins)
    return acc.result()
