"""PCA compression of full-dimension embeddings into the map's latent space."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

PCA_MAGIC = b"LBKP"
PCA_VERSION = 1
_HEADER = struct.Struct("<4sHII")


class RankError(ValueError):
    """Samples carry no variance to fit a basis from."""


@dataclass
class PcaTransform:
    """Affine map between full (``C_full``) and reduced (``C_reduced``) spaces.

    ``basis`` has orthonormal columns; ``encode(y) = basis.T @ (y - mean)`` and
    ``decode(z) = mean + basis @ z``.
    """

    mean: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.ndim != 2 or self.basis.shape[0] != self.mean.shape[0]:
            raise ValueError("basis must be (C_full, C_reduced) matching mean")
        if self.basis.shape[1] > self.basis.shape[0]:
            raise ValueError("C_reduced cannot exceed C_full")

    @property
    def dims(self) -> tuple[int, int]:
        return self.basis.shape

    @property
    def full_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def reduced_dim(self) -> int:
        return self.basis.shape[1]

    def encode(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.full_dim:
            raise ValueError(f"expected last dimension {self.full_dim}, got {y.shape[-1]}")
        return (y - self.mean) @ self.basis

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.reduced_dim:
            raise ValueError(f"expected last dimension {self.reduced_dim}, got {z.shape[-1]}")
        return self.mean + z @ self.basis.T

    def reconstruction_mse(self, samples: np.ndarray) -> float:
        samples = np.asarray(samples, dtype=np.float64)
        return float(np.mean((self.decode(self.encode(samples)) - samples) ** 2))

    def to_bytes(self) -> bytes:
        c_full, c_red = self.dims
        return b"".join(
            [
                _HEADER.pack(PCA_MAGIC, PCA_VERSION, c_full, c_red),
                self.mean.astype("<f4").tobytes(),
                self.basis.astype("<f4").tobytes(order="F"),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "PcaTransform":
        if len(data) < _HEADER.size:
            raise ValueError("truncated PCA transform header")
        magic, version, c_full, c_red = _HEADER.unpack_from(data)
        if magic != PCA_MAGIC:
            raise ValueError(f"bad PCA transform magic {magic!r}")
        if version != PCA_VERSION:
            raise ValueError(f"unsupported PCA transform version {version}")
        expected = _HEADER.size + 4 * (c_full + c_full * c_red)
        if len(data) != expected:
            raise ValueError(f"PCA transform payload is {len(data)} bytes, expected {expected}")
        body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
        mean = body[:c_full]
        basis = body[c_full:].reshape((c_full, c_red), order="F")
        return cls(mean.astype(np.float64), basis.astype(np.float64))

    def save(self, path) -> None:
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "PcaTransform":
        return cls.from_bytes(Path(path).read_bytes())


def pca_fit(samples: np.ndarray, c_reduced: int) -> PcaTransform:
    """Fit the top ``c_reduced`` principal directions of ``samples`` (N, C_full).

    Directions come from an eigendecomposition of the sample covariance, in
    descending eigenvalue order, each column signed so its largest-magnitude
    entry is positive.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    n, c_full = samples.shape
    if c_reduced < 1 or c_reduced > c_full:
        raise ValueError(f"c_reduced must lie in [1, {c_full}], got {c_reduced}")
    if n < c_reduced:
        raise ValueError(f"need at least c_reduced={c_reduced} samples, got {n}")
    if not np.all(np.isfinite(samples)):
        raise ValueError("non-finite sample value")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / max(n - 1, 1)
    if not np.any(np.diag(cov) > 0):
        raise RankError("all samples are identical; PCA basis is undefined")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    basis = evecs[:, order[:c_reduced]]
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(c_reduced)])
    signs[signs == 0] = 1.0
    return PcaTransform(mean, basis * signs)


def encode(t: PcaTransform, y: np.ndarray) -> np.ndarray:
    return t.encode(y)


def decode(t: PcaTransform, z: np.ndarray) -> np.ndarray:
    return t.decode(z)


class PCACompressor(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`pca_fit` for use in pipelines.

    Parameters
    ----------
    n_components : int, default=64
        Reduced latent dimension.
    """

    def __init__(self, n_components: int = 64):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.transform_ = pca_fit(X, self.n_components)
        self.mean_ = self.transform_.mean
        self.components_ = self.transform_.basis.T
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        X = check_array(X, dtype=np.float64)
        return self.transform_.encode(X)

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        X = check_array(X, dtype=np.float64)
        return self.transform_.decode(X)

    @classmethod
    def from_transform(cls, transform: PcaTransform) -> "PCACompressor":
        est = cls(n_components=transform.reduced_dim)
        est.transform_ = transform
        est.mean_ = transform.mean
        est.components_ = transform.basis.T
        est.n_features_in_ = transform.full_dim
        return est
