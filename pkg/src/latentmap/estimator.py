"""scikit-learn style front end over :class:`~latentmap.latent_map.LatentMap`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .inference import QueryDictionary, decode_categories, uncertainty_batch
from .kernel import KernelConfig
from .latent_map import DEFAULT_LAM0, DEFAULT_PSI0, LatentMap, ObservationFrame
from .voxel_grid import GridConfig


class LatentBKI(BaseEstimator):
    """Continuous latent-feature voxel map.

    ``X`` holds world positions (n, 3) and ``y`` the matching latent features
    (n, C). :meth:`partial_fit` folds a batch into the map recursively;
    :meth:`fit` starts from an empty map. Predictions are read from the voxel
    that contains each query position.

    Parameters
    ----------
    resolution : float, default=0.1
        Voxel edge length in meters.
    kernel_length : float, default=0.5
        Support radius of the sparse kernel in meters.
    filter_size : int, default=3
        Width of the neighborhood (in voxels per axis) each point updates.
    lam0, psi0 : float
        Prior confidence and prior diagonal scale of unobserved voxels.
    dtype : {"float32", "float64"}, default="float32"
        Storage precision of the per-voxel mean and scale.

    Attributes
    ----------
    map_ : LatentMap
        The fitted map.
    n_features_in_ : int
        Always 3 (positions).
    latent_dim_ : int
        Feature dimension seen during fit.
    """

    def __init__(
        self,
        resolution: float = 0.1,
        kernel_length: float = 0.5,
        filter_size: int = 3,
        lam0: float = DEFAULT_LAM0,
        psi0: float = DEFAULT_PSI0,
        dtype: str = "float32",
    ):
        self.resolution = resolution
        self.kernel_length = kernel_length
        self.filter_size = filter_size
        self.lam0 = lam0
        self.psi0 = psi0
        self.dtype = dtype

    def _validate_xy(self, X, y):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"X must hold 3-D positions, got {X.shape[1]} columns")
        y = check_array(y, dtype=np.float64)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        return X, y

    def fit(self, X, y):
        if hasattr(self, "map_"):
            del self.map_
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        X, y = self._validate_xy(X, y)
        if not hasattr(self, "map_"):
            self.map_ = LatentMap(
                GridConfig(self.resolution, self.filter_size),
                KernelConfig(self.kernel_length),
                y.shape[1],
                self.lam0,
                self.psi0,
                np.dtype(self.dtype),
            )
            self.n_features_in_ = 3
            self.latent_dim_ = y.shape[1]
        self.map_.update(ObservationFrame(X, y))
        return self

    def _states(self, X):
        check_is_fitted(self, "map_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"X must hold 3-D positions, got {X.shape[1]} columns")
        return self.map_.states_at(X)

    def predict(self, X):
        """Expected latent feature at each position (prior mean where unobserved)."""
        mu, _, _ = self._states(X)
        return mu

    def confidence(self, X):
        """Confidence ``lam`` of the voxel containing each position."""
        return self._states(X)[2]

    def predict_category(self, X, dictionary: QueryDictionary, lift=None):
        """Index of the best-matching phrase; -1 where ``lam <= 1`` or undecodable."""
        mu, _, lam = self._states(X)
        cat, _ = decode_categories(mu, dictionary, lift)
        return np.where(lam > 1, cat, -1)

    def predict_uncertainty(self, X, method: str = "e", dictionary=None, n_samples: int = 100, lift=None, seed=None):
        """Per-position uncertainty; ``inf`` marks voxels where it is undefined."""
        mu, psi, lam = self._states(X)
        return uncertainty_batch(method, mu, lam, psi, dictionary, n_samples, lift, seed)
