"""Sparse voxel addressing: world <-> grid transforms, packed keys, neighborhoods."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# 21 bits per axis, two's-complement style offset so the packed key stays in int64.
AXIS_BITS = 21
AXIS_OFFSET = 1 << (AXIS_BITS - 1)
AXIS_MASK = (1 << AXIS_BITS) - 1
INDEX_MIN = -AXIS_OFFSET
INDEX_MAX = AXIS_OFFSET - 1
# Relative tolerance (in cell units) within which a coordinate counts as on a face.
FACE_SNAP = 1e-9


class VoxelIndex(NamedTuple):
    i: int
    j: int
    k: int


@dataclass(frozen=True)
class GridConfig:
    """Voxel resolution (meters) and neighborhood width (voxels per axis)."""

    resolution: float = 0.1
    filter_size: int = 3

    def __post_init__(self):
        if not np.isfinite(self.resolution) or self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if int(self.filter_size) != self.filter_size or self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError(f"filter_size must be an odd positive integer, got {self.filter_size}")


def world_to_index(p, cfg: GridConfig) -> VoxelIndex:
    """Return the index of the half-open cell containing ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinate")
    i, j, k = world_to_indices(p[None, :], cfg)[0]
    return VoxelIndex(int(i), int(j), int(k))


def world_to_indices(points: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Vectorized :func:`world_to_index` for an (N, 3) array; returns int64 (N, 3)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite coordinate")
    q = points / cfg.resolution
    # p / r lands a hair below an integer for decimal faces (0.3 / 0.1 = 2.9999...);
    # snap those onto the face so the boundary still belongs to the upper cell.
    nearest = np.round(q)
    on_face = np.abs(q - nearest) <= FACE_SNAP * np.maximum(1.0, np.abs(q))
    idx = np.where(on_face, nearest, np.floor(q))
    return idx.astype(np.int64)


def index_to_centroid(v, cfg: GridConfig) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) + 0.5) * cfg.resolution


def indices_to_centroids(indices: np.ndarray, cfg: GridConfig) -> np.ndarray:
    return (np.asarray(indices, dtype=np.float64) + 0.5) * cfg.resolution


def neighbor_offsets(filter_size: int) -> np.ndarray:
    """(k^3, 3) offsets of the cube of width ``filter_size`` in lexicographic order."""
    half = filter_size // 2
    r = np.arange(-half, half + 1, dtype=np.int64)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def neighbors(v, cfg: GridConfig) -> list[VoxelIndex]:
    base = np.asarray(v, dtype=np.int64)
    return [VoxelIndex(*map(int, base + off)) for off in neighbor_offsets(cfg.filter_size)]


def pack_indices(indices: np.ndarray) -> np.ndarray:
    """Pack (N, 3) signed voxel indices into int64 keys (21 bits per axis)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < INDEX_MIN or indices.max() > INDEX_MAX):
        raise ValueError(f"voxel index outside packable range [{INDEX_MIN}, {INDEX_MAX}]")
    shifted = indices + AXIS_OFFSET
    return (shifted[..., 0] << (2 * AXIS_BITS)) | (shifted[..., 1] << AXIS_BITS) | shifted[..., 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    i = (keys >> (2 * AXIS_BITS)) & AXIS_MASK
    j = (keys >> AXIS_BITS) & AXIS_MASK
    k = keys & AXIS_MASK
    return np.stack([i, j, k], axis=-1) - AXIS_OFFSET
