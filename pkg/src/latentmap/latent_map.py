"""Sparse voxel map of normal-inverse-Wishart beliefs over latent features.

Each allocated voxel stores the posterior mean ``mu``, the diagonal of the
scale matrix ``psi`` and the confidence ``lam`` (the pseudo-count, shared by
the mean and the covariance). A frame of points is folded in with one
conjugate merge per touched voxel:

    kbar   = sum_i k_i
    ybar   = sum_i k_i y_i / kbar
    Sbar   = sum_i k_i (y_i - ybar)**2
    lam'   = lam + kbar
    mu'    = (lam mu + kbar ybar) / lam'
    psi'   = psi + Sbar + (lam kbar / lam') (ybar - mu)**2

where ``k_i`` is the kernel weight of point ``i`` against the voxel centroid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import sparse

from .kernel import WEIGHT_EPS, KernelConfig, sparse_kernel
from .voxel_grid import (
    GridConfig,
    indices_to_centroids,
    neighbor_offsets,
    pack_indices,
    unpack_keys,
    world_to_indices,
)

logger = logging.getLogger(__name__)

DEFAULT_LAM0 = 1e-3
DEFAULT_PSI0 = 1e-6


@dataclass
class VoxelState:
    mu: np.ndarray
    psi_diag: np.ndarray
    lam: float


@dataclass
class Observation:
    """A single point; mostly useful for tests and hand-built frames."""

    position: np.ndarray
    feature: np.ndarray
    range: Optional[float] = None
    label: Optional[int] = None


@dataclass
class ObservationFrame:
    """One sensor batch of world-frame points with their latent features.

    Attributes:
        positions: (N, 3) float array, meters.
        features: (N, C) float array.
        ranges: optional (N,) sensor ranges, used for depth filtering.
        labels: optional (N,) ground-truth category ids (evaluation only).
    """

    positions: np.ndarray
    features: np.ndarray
    ranges: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1 and n == 0:
            self.features = self.features.reshape(0, 0)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(
                f"features must be (N, C) with N={n}, got shape {self.features.shape}"
            )
        if self.ranges is not None:
            self.ranges = np.asarray(self.ranges, dtype=np.float64).reshape(-1)
            if self.ranges.shape[0] != n:
                raise ValueError("ranges length does not match point count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValueError("labels length does not match point count")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_observations(cls, observations: Iterable[Observation]) -> "ObservationFrame":
        obs = list(observations)
        if not obs:
            return cls(np.zeros((0, 3)), np.zeros((0, 0)))
        ranges = None
        labels = None
        if all(o.range is not None for o in obs):
            ranges = [o.range for o in obs]
        if all(o.label is not None for o in obs):
            labels = [o.label for o in obs]
        return cls(
            np.stack([np.asarray(o.position, dtype=np.float64) for o in obs]),
            np.stack([np.asarray(o.feature, dtype=np.float64) for o in obs]),
            ranges,
            labels,
        )

    def subset(self, mask_or_index) -> "ObservationFrame":
        sel = np.asarray(mask_or_index)
        return ObservationFrame(
            self.positions[sel],
            self.features[sel],
            None if self.ranges is None else self.ranges[sel],
            None if self.labels is None else self.labels[sel],
        )

    @staticmethod
    def concatenate(frames: Iterable["ObservationFrame"]) -> "ObservationFrame":
        frames = [f for f in frames if len(f)]
        if not frames:
            return ObservationFrame(np.zeros((0, 3)), np.zeros((0, 0)))
        has_ranges = all(f.ranges is not None for f in frames)
        has_labels = all(f.labels is not None for f in frames)
        return ObservationFrame(
            np.concatenate([f.positions for f in frames]),
            np.concatenate([f.features for f in frames]),
            np.concatenate([f.ranges for f in frames]) if has_ranges else None,
            np.concatenate([f.labels for f in frames]) if has_labels else None,
        )


@dataclass
class FrameStatistics:
    """Kernel-weighted sufficient statistics of one frame, grouped by voxel."""

    keys: np.ndarray  # (V,) packed voxel keys, ascending
    kbar: np.ndarray  # (V,)
    ybar: np.ndarray  # (V, C)
    scatter: np.ndarray  # (V, C) diagonal of Sbar


def point_voxel_pairs(positions: np.ndarray, grid: GridConfig, kernel: KernelConfig):
    """Enumerate (point, voxel) pairs inside each point's filter cube.

    Returns ``(point_index, keys, weights)`` restricted to weights above
    ``WEIGHT_EPS``.
    """
    n = positions.shape[0]
    k = grid.filter_size
    half = k // 2
    base = world_to_indices(positions, grid)
    # Per-axis squared offsets to each candidate centroid, summed by broadcasting.
    steps = np.arange(-half, half + 1, dtype=np.float64)
    frac = positions / grid.resolution - base - 0.5  # (N, 3) offset from own centroid, cells
    axis_sq = ((frac[:, :, None] - steps[None, None, :]) * grid.resolution) ** 2  # (N, 3, k)
    dist_sq = (
        axis_sq[:, 0, :, None, None] + axis_sq[:, 1, None, :, None] + axis_sq[:, 2, None, None, :]
    ).reshape(n, k**3)
    weights = sparse_kernel(np.sqrt(dist_sq), kernel)
    keep = weights > WEIGHT_EPS
    point_index, slot = np.nonzero(keep)
    offsets = neighbor_offsets(k)
    keys = pack_indices(base[point_index] + offsets[slot])
    return point_index, keys, weights[point_index, slot]


def frame_statistics(frame: ObservationFrame, grid: GridConfig, kernel: KernelConfig) -> FrameStatistics:
    """Bucket a frame's points by affected voxel and reduce them to (kbar, ybar, Sbar)."""
    c = frame.feature_dim
    if len(frame) == 0:
        return FrameStatistics(np.zeros(0, np.int64), np.zeros(0), np.zeros((0, c)), np.zeros((0, c)))
    point_index, keys, weights = point_voxel_pairs(frame.positions, grid, kernel)
    if keys.size == 0:
        return FrameStatistics(np.zeros(0, np.int64), np.zeros(0), np.zeros((0, c)), np.zeros((0, c)))
    uniq, inv = np.unique(keys, return_inverse=True)
    w = sparse.csr_matrix(
        (weights, (inv, point_index)), shape=(uniq.size, len(frame)), dtype=np.float64
    )
    kbar = np.asarray(w.sum(axis=1)).ravel()
    # Shift by the frame mean so the one-pass scatter formula keeps its precision.
    shift = frame.features.mean(axis=0)
    centered = frame.features - shift
    first = w @ centered
    second = w @ (centered * centered)
    ybar_c = first / kbar[:, None]
    scatter = np.maximum(second - kbar[:, None] * ybar_c * ybar_c, 0.0)
    return FrameStatistics(uniq, kbar, ybar_c + shift, scatter)


class LatentMap:
    """Sparse map of per-voxel normal-inverse-Wishart beliefs.

    Unallocated voxels read as the prior ``mu = 0, psi = psi0, lam = lam0``.
    ``mu`` and ``psi`` are stored at ``dtype`` (float32 by default); ``lam`` and
    all update arithmetic are float64.
    """

    def __init__(
        self,
        grid: GridConfig,
        kernel: KernelConfig,
        latent_dim: int,
        lam0: float = DEFAULT_LAM0,
        psi0: float = DEFAULT_PSI0,
        dtype=np.float32,
    ):
        if int(latent_dim) != latent_dim or latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
        if not (np.isfinite(lam0) and lam0 >= 0):
            raise ValueError(f"lam0 must be finite and >= 0, got {lam0}")
        if not (np.isfinite(psi0) and psi0 >= 0):
            raise ValueError(f"psi0 must be finite and >= 0, got {psi0}")
        self.grid = grid
        self.kernel = kernel
        self.latent_dim = int(latent_dim)
        self.lam0 = float(lam0)
        self.psi0 = float(psi0)
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError("dtype must be float32 or float64")
        self._rows: dict[int, int] = {}
        self._keys = np.zeros(0, dtype=np.int64)
        self._mu = np.zeros((0, self.latent_dim), dtype=self.dtype)
        self._psi = np.zeros((0, self.latent_dim), dtype=self.dtype)
        self._lam = np.zeros(0, dtype=np.float64)
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __repr__(self) -> str:
        return (
            f"LatentMap(resolution={self.grid.resolution}, filter_size={self.grid.filter_size}, "
            f"kernel_length={self.kernel.length}, latent_dim={self.latent_dim}, voxels={self._size})"
        )

    # -- bulk views over allocated voxels (row order = allocation order) --
    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._size]

    @property
    def indices(self) -> np.ndarray:
        return unpack_keys(self.keys)

    @property
    def centroids(self) -> np.ndarray:
        return indices_to_centroids(self.indices, self.grid)

    @property
    def mu(self) -> np.ndarray:
        return self._mu[: self._size]

    @property
    def psi_diag(self) -> np.ndarray:
        return self._psi[: self._size]

    @property
    def lam(self) -> np.ndarray:
        return self._lam[: self._size]

    @property
    def nbytes(self) -> int:
        """Bytes held by the per-voxel arrays (excludes the key index)."""
        return self._keys.nbytes + self._mu.nbytes + self._psi.nbytes + self._lam.nbytes

    def prior_state(self) -> VoxelState:
        return VoxelState(
            np.zeros(self.latent_dim),
            np.full(self.latent_dim, self.psi0),
            self.lam0,
        )

    def rows_for_keys(self, keys: np.ndarray) -> np.ndarray:
        """Row of each packed key, -1 where unallocated."""
        get = self._rows.get
        return np.fromiter((get(k, -1) for k in np.asarray(keys).tolist()), dtype=np.int64, count=len(keys))

    def get_voxel(self, v) -> VoxelState:
        key = int(pack_indices(np.asarray(v, dtype=np.int64)[None, :])[0])
        row = self._rows.get(key)
        if row is None:
            return self.prior_state()
        return VoxelState(
            self._mu[row].astype(np.float64),
            self._psi[row].astype(np.float64),
            float(self._lam[row]),
        )

    def states_at(self, positions: np.ndarray):
        """Vectorized lookup of the voxel containing each position.

        Returns ``(mu, psi_diag, lam)`` as float64 arrays; positions in
        unallocated voxels read as the prior.
        """
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        rows = self.rows_for_keys(pack_indices(world_to_indices(positions, self.grid)))
        hit = rows >= 0
        mu = np.zeros((rows.size, self.latent_dim))
        psi = np.full((rows.size, self.latent_dim), self.psi0)
        lam = np.full(rows.size, self.lam0)
        mu[hit] = self._mu[rows[hit]]
        psi[hit] = self._psi[rows[hit]]
        lam[hit] = self._lam[rows[hit]]
        return mu, psi, lam

    def _allocate(self, keys: np.ndarray) -> np.ndarray:
        """Allocate prior rows for ``keys`` (all new); return their row numbers."""
        n_new = keys.size
        needed = self._size + n_new
        if needed > self._keys.shape[0]:
            cap = self._keys.shape[0]
            new_cap = needed if cap == 0 else max(needed, int(cap * 1.5))
            self._keys = _grow(self._keys, new_cap)
            self._mu = _grow(self._mu, new_cap)
            self._psi = _grow(self._psi, new_cap)
            self._lam = _grow(self._lam, new_cap)
        rows = np.arange(self._size, needed)
        self._keys[rows] = keys
        self._mu[rows] = 0.0
        self._psi[rows] = self.psi0
        self._lam[rows] = self.lam0
        self._rows.update(zip(keys.tolist(), rows.tolist()))
        self._size = needed
        return rows

    def shrink_to_fit(self) -> None:
        n = self._size
        self._keys = self._keys[:n].copy()
        self._mu = self._mu[:n].copy()
        self._psi = self._psi[:n].copy()
        self._lam = self._lam[:n].copy()

    def update(self, frame: ObservationFrame) -> "LatentMap":
        """Fold one frame of observations into the map in place."""
        if len(frame) == 0:
            return self
        if frame.feature_dim != self.latent_dim:
            raise ValueError(
                f"feature dimension {frame.feature_dim} does not match map latent_dim {self.latent_dim}"
            )
        if not np.all(np.isfinite(frame.features)):
            raise ValueError("non-finite feature value")
        stats = frame_statistics(frame, self.grid, self.kernel)
        if stats.keys.size == 0:
            return self
        self.merge_statistics(stats)
        return self

    def merge_statistics(self, stats: FrameStatistics) -> None:
        rows = self.rows_for_keys(stats.keys)
        new = rows < 0
        if np.any(new):
            rows[new] = self._allocate(stats.keys[new])

        lam_prev = self._lam[rows]
        kbar = stats.kbar
        lam_new = lam_prev + kbar
        mu = self._mu[rows].astype(np.float64)
        dev = stats.ybar - mu
        # mu' = mu + (kbar / lam') (ybar - mu), algebraically the weighted running mean.
        mu += (kbar / lam_new)[:, None] * dev
        dev *= dev
        dev *= (lam_prev * kbar / lam_new)[:, None]
        dev += stats.scatter
        psi = self._psi[rows].astype(np.float64)
        psi += dev

        self._lam[rows] = lam_new
        self._mu[rows] = mu
        self._psi[rows] = psi
        logger.debug("merged %d voxels (%d new)", rows.size, int(new.sum()))

    def copy(self) -> "LatentMap":
        other = LatentMap(self.grid, self.kernel, self.latent_dim, self.lam0, self.psi0, self.dtype)
        other._rows = dict(self._rows)
        other._keys = self.keys.copy()
        other._mu = self.mu.copy()
        other._psi = self.psi_diag.copy()
        other._lam = self.lam.copy()
        other._size = self._size
        return other

    @classmethod
    def from_arrays(
        cls,
        grid: GridConfig,
        kernel: KernelConfig,
        keys: np.ndarray,
        lam: np.ndarray,
        mu: np.ndarray,
        psi_diag: np.ndarray,
        lam0: float = DEFAULT_LAM0,
        psi0: float = DEFAULT_PSI0,
        dtype=np.float32,
    ) -> "LatentMap":
        mu = np.asarray(mu)
        m = cls(grid, kernel, mu.shape[1], lam0, psi0, dtype)
        keys = np.asarray(keys, dtype=np.int64)
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate voxel keys")
        m._keys = keys.copy()
        m._mu = mu.astype(m.dtype, copy=True)
        m._psi = np.asarray(psi_diag).astype(m.dtype, copy=True)
        m._lam = np.asarray(lam, dtype=np.float64).copy()
        m._size = keys.size
        m._rows = dict(zip(keys.tolist(), range(keys.size)))
        return m


def _grow(arr: np.ndarray, capacity: int) -> np.ndarray:
    out = np.zeros((capacity,) + arr.shape[1:], dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


def new_map(
    grid: GridConfig,
    kernel: KernelConfig,
    latent_dim: int,
    prior: tuple[float, float] = (DEFAULT_LAM0, DEFAULT_PSI0),
    dtype=np.float32,
) -> LatentMap:
    lam0, psi0 = prior
    return LatentMap(grid, kernel, latent_dim, lam0, psi0, dtype)


def update(m: LatentMap, frame: ObservationFrame) -> LatentMap:
    return m.update(frame)


def get_voxel(m: LatentMap, v) -> VoxelState:
    return m.get_voxel(v)
