"""Slow reference computations, written independently of the package internals."""

import math
from collections import defaultdict

import numpy as np


def kernel_ref(d, length):
    if d >= length:
        return 0.0
    x = d / length
    return (2.0 + math.cos(2 * math.pi * x) * (1.0 - x) + math.sin(2 * math.pi * x) / (2 * math.pi)) / 3.0


def brute_force_voxels(positions, features, resolution, filter_size, length, lam0=0.0, psi0=0.0):
    """Per-voxel (lam, mu, psi_diag) from one pass over all points.

    Each voxel is the pooled weighted sample of every point whose filter cube
    covers it, plus the prior acting as one pseudo-observation of weight
    ``lam0`` at the origin carrying scatter ``psi0``:

        lam = lam0 + sum w
        mu  = sum w y / lam
        psi = psi0 + lam0 * mu**2 + sum w (y - mu)**2
    """
    half = filter_size // 2
    groups = defaultdict(list)
    for p, y in zip(positions, features):
        base = [math.floor(c / resolution) for c in p]
        for di in range(-half, half + 1):
            for dj in range(-half, half + 1):
                for dk in range(-half, half + 1):
                    v = (base[0] + di, base[1] + dj, base[2] + dk)
                    centroid = [(v[a] + 0.5) * resolution for a in range(3)]
                    d = math.sqrt(sum((p[a] - centroid[a]) ** 2 for a in range(3)))
                    w = kernel_ref(d, length)
                    if w > 1e-9:
                        groups[v].append((w, np.asarray(y, dtype=float)))
    out = {}
    for v, items in groups.items():
        w = np.array([it[0] for it in items])
        ys = np.array([it[1] for it in items])
        lam = lam0 + w.sum()
        mu = (w[:, None] * ys).sum(0) / lam
        psi = psi0 + lam0 * mu**2 + (w[:, None] * (ys - mu) ** 2).sum(0)
        out[v] = (lam, mu, psi)
    return out


def rel_err(a, b):
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)
