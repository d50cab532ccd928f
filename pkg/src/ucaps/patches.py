"""Patch tiling, extraction and overlap-averaged reassembly."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

__all__ = ["PatchPlan", "plan_patches", "extract", "reassemble", "sliding_window",
           "random_origins"]


def _axis_origins(extent: int, p: int, stride: int) -> List[int]:
    if extent <= p:
        return [0]
    origins = list(range(0, extent - p + 1, stride))
    if origins[-1] != extent - p:
        origins.append(extent - p)
    return origins


@dataclass
class PatchPlan:
    """Patch origins on a (possibly reflection-padded) grid.

    ``shape`` is the original extent; ``padded_shape`` is at least ``p``
    along every axis.
    """

    shape: Tuple[int, int, int]
    padded_shape: Tuple[int, int, int]
    patch_size: int
    overlap: int
    origins: List[Tuple[int, int, int]]

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap

    def coverage(self) -> np.ndarray:
        """Number of patches covering each voxel of the padded grid."""
        count = np.zeros(self.padded_shape, dtype=np.int32)
        p = self.patch_size
        for o in self.origins:
            count[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] += 1
        return count


def plan_patches(shape: Sequence[int], p: int, overlap: int = None) -> PatchPlan:
    """Cover ``shape`` with ``p``-cubes; the default overlap is ``p // 2``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3:
        raise ValueError(f"need a 3D shape, got {shape}")
    if overlap is None:
        overlap = p // 2
    if p < 1:
        raise ValueError("patch size must be positive")
    if not 0 <= overlap < p:
        raise ValueError(f"overlap {overlap} must satisfy 0 <= overlap < patch size {p}")
    padded = tuple(max(s, p) for s in shape)
    axes = [_axis_origins(s, p, p - overlap) for s in padded]
    return PatchPlan(shape, padded, p, overlap, list(itertools.product(*axes)))


def _pad_to(volume: np.ndarray, padded_shape, spatial_axes) -> np.ndarray:
    pad = [(0, 0)] * volume.ndim
    for ax, target in zip(spatial_axes, padded_shape):
        extra = target - volume.shape[ax]
        if extra > 0:
            pad[ax] = (0, extra)
    if all(p == (0, 0) for p in pad):
        return volume
    # reflect needs extent > pad; symmetric repeats the edge and always works
    mode = "reflect" if all(volume.shape[a] > pad[a][1] for a in range(volume.ndim)) else "symmetric"
    return np.pad(volume, pad, mode=mode)


def extract(volume: np.ndarray, origin: Sequence[int], p: int) -> np.ndarray:
    """Copy the ``p``-cube at ``origin`` from the last three axes of ``volume``."""
    x, y, z = origin
    spatial = volume.shape[-3:]
    if any(o < 0 or o + p > s for o, s in zip(origin, spatial)):
        raise ValueError(f"patch at {tuple(origin)} of size {p} leaves volume {spatial}")
    return volume[..., x:x + p, y:y + p, z:z + p].copy()


def reassemble(plan: PatchPlan, patches: Sequence[np.ndarray]) -> np.ndarray:
    """Average overlapping patch outputs ``[..., p, p, p]`` back onto the original grid."""
    if len(patches) != len(plan.origins):
        raise ValueError(f"{len(patches)} patches for {len(plan.origins)} origins")
    p = plan.patch_size
    lead = patches[0].shape[:-3]
    total = np.zeros(lead + plan.padded_shape, dtype=np.float64)
    for o, patch in zip(plan.origins, patches):
        total[..., o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] += patch
    total /= plan.coverage()
    h, w, d = plan.shape
    return total[..., :h, :w, :d]


def sliding_window(predict: Callable[[np.ndarray], np.ndarray], image: np.ndarray, p: int,
                   overlap: int = None, batch_size: int = 1) -> np.ndarray:
    """Tile ``image`` ``[C, H, W, D]``, run ``predict`` on ``[B, C, p, p, p]`` batches
    and return the averaged ``[K, H, W, D]`` output."""
    plan = plan_patches(image.shape[-3:], p, overlap)
    padded = _pad_to(image, plan.padded_shape, range(1, 4))
    outputs = []
    for i in range(0, len(plan.origins), batch_size):
        chunk = plan.origins[i:i + batch_size]
        batch = np.stack([extract(padded, o, p) for o in chunk])
        outputs.extend(np.asarray(predict(batch)))
    return reassemble(plan, outputs)


def random_origins(rng: np.random.Generator, shape: Sequence[int], p: int, n: int):
    """``n`` uniformly random in-bounds patch origins."""
    hi = [max(s - p, 0) + 1 for s in shape]
    return [tuple(int(rng.integers(0, h)) for h in hi) for _ in range(n)]
