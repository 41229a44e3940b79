"""Compactly supported isotropic kernel weighting points against voxel centroids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel_grid import GridConfig, index_to_centroid

# Weights at or below this are dropped so far-away points never allocate voxels.
WEIGHT_EPS = 1e-9


@dataclass(frozen=True)
class KernelConfig:
    """Kernel support ``length`` (meters) and which closed form to evaluate.

    The default form is ``(2 + cos(2 pi x)(1 - x) + sin(2 pi x) / (2 pi)) / 3``
    with ``x = d / length``; it falls from 1 to 1/2 at ``x = 1/2``, rises again
    and jumps from 2/3 to 0 at the support edge. ``taper=True`` selects
    ``(2 + cos(2 pi x)) / 3 * (1 - x) + sin(2 pi x) / (2 pi)``, which decreases
    monotonically and vanishes continuously at ``x = 1``.
    """

    length: float = 0.5
    taper: bool = False

    def __post_init__(self):
        if not np.isfinite(self.length) or self.length <= 0:
            raise ValueError(f"kernel length must be positive, got {self.length}")


def sparse_kernel(d, cfg: KernelConfig):
    """Kernel weight for distance(s) ``d``; zero outside ``d < length``.

    Accepts scalars or arrays and returns the same shape. See
    :class:`KernelConfig` for the two closed forms.
    """
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0) or not np.all(np.isfinite(d_arr)):
        raise ValueError("distance must be finite and non-negative")
    x = d_arr / cfg.length
    two_pi_x = 2.0 * np.pi * x
    if cfg.taper:
        k = (2.0 + np.cos(two_pi_x)) / 3.0 * (1.0 - x) + np.sin(two_pi_x) / (2.0 * np.pi)
    else:
        k = (2.0 + np.cos(two_pi_x) * (1.0 - x) + np.sin(two_pi_x) / (2.0 * np.pi)) / 3.0
    k = np.where(x < 1.0, np.clip(k, 0.0, 1.0), 0.0)
    if np.ndim(d) == 0:
        return float(k)
    return k


def point_voxel_weight(p, v, grid: GridConfig, cfg: KernelConfig) -> float:
    d = float(np.linalg.norm(np.asarray(p, dtype=np.float64) - index_to_centroid(v, grid)))
    return sparse_kernel(d, cfg)
