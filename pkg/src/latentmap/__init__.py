"""Bayesian kernel inference over latent feature voxel maps."""

from .compression import PCACompressor, PcaTransform, pca_fit
from .estimator import LatentBKI
from .inference import (
    UNDEFINED,
    PosteriorPredictive,
    QueryDictionary,
    VoxelPrediction,
    decode_category,
    posterior_predictive,
    predictive_covariance_diag,
    predictive_expectation,
    sample_features,
    uncertainty_d_optimality,
    uncertainty_e_optimality,
    uncertainty_sampling,
)
from .kernel import KernelConfig, point_voxel_weight, sparse_kernel
from .latent_map import LatentMap, Observation, ObservationFrame, VoxelState, new_map
from .voxel_grid import GridConfig, VoxelIndex, index_to_centroid, neighbors, world_to_index

__version__ = "0.1.0"

__all__ = [
    "GridConfig",
    "KernelConfig",
    "LatentBKI",
    "LatentMap",
    "Observation",
    "ObservationFrame",
    "PCACompressor",
    "PcaTransform",
    "PosteriorPredictive",
    "QueryDictionary",
    "UNDEFINED",
    "VoxelIndex",
    "VoxelPrediction",
    "VoxelState",
    "decode_category",
    "index_to_centroid",
    "neighbors",
    "new_map",
    "pca_fit",
    "point_voxel_weight",
    "posterior_predictive",
    "predictive_covariance_diag",
    "predictive_expectation",
    "sample_features",
    "sparse_kernel",
    "uncertainty_d_optimality",
    "uncertainty_e_optimality",
    "uncertainty_sampling",
    "world_to_index",
]
