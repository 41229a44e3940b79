"""Decoding voxel beliefs: posterior predictive, category queries, uncertainty.

The posterior predictive of a voxel is a multivariate Student-t with ``lam``
degrees of freedom, location ``mu`` and diagonal scale
``(lam + 1) / lam**2 * psi``. Its mean exists for ``lam > 1`` and its
covariance, ``lam / (lam - 2)`` times the scale, for ``lam > 2``.

Batch helpers (suffix ``_batch``) take stacked ``(V,)``/``(V, C)`` arrays and
return :data:`UNDEFINED` wherever a quantity does not exist, so results can be
totally ordered with undefined entries ranking as the most uncertain.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .compression import PcaTransform
from .latent_map import VoxelState

UNDEFINED = np.inf

# Cosine denominators below this are treated as a zero vector.
_NORM_EPS = 1e-12


class InsufficientEvidenceError(ValueError):
    """The voxel's confidence is too low for the requested quantity."""


class ExpectationUndefinedError(InsufficientEvidenceError):
    pass


class CovarianceUndefinedError(InsufficientEvidenceError):
    pass


class UndecodableError(ValueError):
    """The expected feature has zero norm, so cosine decoding is meaningless."""


class MarginalEvidenceWarning(UserWarning):
    """Expectation exists but the covariance does not (1 < lam <= 2)."""


@dataclass
class PosteriorPredictive:
    mean: np.ndarray
    scale_diag: np.ndarray
    dof: float

    @property
    def low_confidence(self) -> bool:
        return self.dof <= 1.0


@dataclass
class QueryDictionary:
    """Ordered phrases with one precomputed embedding each."""

    phrases: list[str]
    embeddings: np.ndarray

    def __post_init__(self):
        self.phrases = list(self.phrases)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.phrases):
            raise ValueError("need exactly one embedding row per phrase")
        if len(self.phrases) == 0:
            raise ValueError("dictionary is empty")
        if np.any(np.linalg.norm(self.embeddings, axis=1) <= _NORM_EPS):
            raise ValueError("dictionary contains a zero-norm embedding")

    def __len__(self) -> int:
        return len(self.phrases)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, phrase: str) -> int:
        try:
            return self.phrases.index(phrase)
        except ValueError:
            raise KeyError(f"unknown phrase {phrase!r}") from None

    @property
    def unit_embeddings(self) -> np.ndarray:
        return self.embeddings / np.linalg.norm(self.embeddings, axis=1, keepdims=True)


@dataclass
class VoxelPrediction:
    category: int
    score: float
    uncertainty: float = 0.0


def posterior_predictive(s: VoxelState) -> PosteriorPredictive:
    lam = float(s.lam)
    if not lam > 0:
        raise InsufficientEvidenceError(f"posterior predictive needs lam > 0, got {lam}")
    scale = (lam + 1.0) / lam**2 * np.asarray(s.psi_diag, dtype=np.float64)
    return PosteriorPredictive(np.asarray(s.mu, dtype=np.float64), scale, lam)


def predictive_expectation(s: VoxelState) -> np.ndarray:
    lam = float(s.lam)
    if not lam > 1:
        raise ExpectationUndefinedError(f"expectation needs lam > 1, got {lam}")
    if lam <= 2:
        warnings.warn(
            f"lam={lam:.4g}: expectation defined but covariance is not", MarginalEvidenceWarning, stacklevel=2
        )
    return np.asarray(s.mu, dtype=np.float64)


def predictive_covariance_diag(s: VoxelState) -> np.ndarray:
    lam = float(s.lam)
    if not lam > 2:
        raise CovarianceUndefinedError(f"covariance needs lam > 2, got {lam}")
    return lam / (lam - 2.0) * (lam + 1.0) / lam**2 * np.asarray(s.psi_diag, dtype=np.float64)


def _lift(mu: np.ndarray, dictionary: QueryDictionary, lift: Optional[PcaTransform]) -> np.ndarray:
    if lift is not None:
        mu = lift.decode(mu)
    if mu.shape[-1] != dictionary.dim:
        raise ValueError(
            f"feature dimension {mu.shape[-1]} does not match dictionary dimension {dictionary.dim}; "
            "supply the PCA transform used to build the map"
        )
    return mu


def cosine_scores(features: np.ndarray, dictionary: QueryDictionary, lift: Optional[PcaTransform] = None):
    """Cosine similarity of each feature row against every phrase: (..., W).

    Zero-norm features score NaN.
    """
    feats = _lift(np.asarray(features, dtype=np.float64), dictionary, lift)
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norms > _NORM_EPS, feats / norms, np.nan)
    return unit @ dictionary.unit_embeddings.T


def decode_category(
    s: VoxelState, dictionary: QueryDictionary, lift: Optional[PcaTransform] = None
) -> VoxelPrediction:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MarginalEvidenceWarning)
        mu = predictive_expectation(s)
    scores = cosine_scores(mu, dictionary, lift)
    if np.isnan(scores).any():
        raise UndecodableError("expected feature has zero norm")
    best = int(np.argmax(scores))  # first maximum = lowest phrase index
    return VoxelPrediction(best, float(scores[best]))


def decode_categories(mu: np.ndarray, dictionary: QueryDictionary, lift: Optional[PcaTransform] = None):
    """Batch decode: returns ``(category, score)``; undecodable rows get -1 / NaN."""
    scores = cosine_scores(mu, dictionary, lift)
    bad = np.isnan(scores).any(axis=-1)
    cat = np.argmax(np.where(np.isnan(scores), -np.inf, scores), axis=-1)
    cat = np.where(bad, -1, cat)
    best = np.take_along_axis(scores, np.maximum(cat, 0)[..., None], axis=-1)[..., 0]
    return cat, np.where(bad, np.nan, best)


def _student_t_draws(mu, scale_diag, lam, n, rng: np.random.Generator) -> np.ndarray:
    """(n, C) multivariate-t draws sharing one chi-square variate per draw."""
    c = mu.shape[0]
    z = rng.standard_normal((n, c)) * np.sqrt(scale_diag)
    u = rng.chisquare(lam, size=n)
    return mu + z * np.sqrt(lam / u)[:, None]


def sample_features(s: VoxelState, n: int, rng_seed=None) -> np.ndarray:
    """Draw ``n`` feature vectors from the voxel's posterior predictive.

    ``rng_seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    pred = posterior_predictive(s)
    if n < 0:
        raise ValueError("sample count must be non-negative")
    if n == 0:
        return np.zeros((0, pred.mean.shape[0]))
    rng = np.random.default_rng(rng_seed)
    return _student_t_draws(pred.mean, pred.scale_diag, pred.dof, int(n), rng)


def sampling_score_variances(
    s: VoxelState,
    dictionary: QueryDictionary,
    n: int,
    lift: Optional[PcaTransform] = None,
    rng_seed=None,
):
    """Decoded-space spread of ``n`` samples.

    Returns ``(winning_score_variance, per_category_score_variance)``.
    """
    samples = sample_features(s, n, rng_seed)
    if samples.shape[0] <= 1:
        return 0.0, np.zeros(len(dictionary))
    scores = cosine_scores(samples, dictionary, lift)
    scores = scores[~np.isnan(scores).any(axis=1)]
    if scores.shape[0] <= 1:
        return 0.0, np.zeros(len(dictionary))
    # Shift by the first draw so identical draws give exactly zero.
    scores = scores - scores[0]
    return float(np.var(scores.max(axis=1))), np.var(scores, axis=0)


def uncertainty_sampling(
    s: VoxelState,
    dictionary: QueryDictionary,
    n: int,
    lift: Optional[PcaTransform] = None,
    rng_seed=None,
) -> float:
    """Variance of the winning cosine score over ``n`` decoded samples."""
    return sampling_score_variances(s, dictionary, n, lift, rng_seed)[0]


def uncertainty_e_optimality(s: VoxelState) -> float:
    return float(np.max(predictive_covariance_diag(s)))


def uncertainty_d_optimality(s: VoxelState) -> float:
    cov = predictive_covariance_diag(s)
    if np.any(cov <= 0):
        raise CovarianceUndefinedError("D-optimality needs a strictly positive covariance diagonal")
    return float(np.exp(np.mean(np.log(cov))))


# -- batch forms over stacked voxel arrays --


def covariance_diag_batch(lam: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Predictive covariance diagonals, rows with lam <= 2 set to UNDEFINED."""
    lam = np.asarray(lam, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    ok = lam > 2
    factor = np.full(lam.shape, UNDEFINED)
    lo = lam[ok]
    factor[ok] = lo / (lo - 2.0) * (lo + 1.0) / lo**2
    out = np.full(psi.shape, UNDEFINED)
    out[ok] = factor[ok, None] * psi[ok]
    return out


def e_optimality_batch(lam: np.ndarray, psi: np.ndarray) -> np.ndarray:
    cov = covariance_diag_batch(lam, psi)
    return cov.max(axis=1) if cov.shape[1] else np.full(cov.shape[0], UNDEFINED)


def d_optimality_batch(lam: np.ndarray, psi: np.ndarray) -> np.ndarray:
    cov = covariance_diag_batch(lam, psi)
    out = np.full(cov.shape[0], UNDEFINED)
    ok = np.all(np.isfinite(cov) & (cov > 0), axis=1)
    out[ok] = np.exp(np.mean(np.log(cov[ok]), axis=1))
    return out


def sampling_uncertainty_batch(
    mu: np.ndarray,
    lam: np.ndarray,
    psi: np.ndarray,
    dictionary: QueryDictionary,
    n: int,
    lift: Optional[PcaTransform] = None,
    seed=None,
) -> np.ndarray:
    """Per-voxel sampling uncertainty; voxel ``v`` draws from child seed ``v``.

    Voxels with lam <= 2 are UNDEFINED, matching the optimality criteria so the
    three methods rank the same set of voxels.
    """
    lam = np.asarray(lam, dtype=np.float64)
    out = np.full(lam.shape[0], UNDEFINED)
    children = np.random.SeedSequence(seed).spawn(lam.shape[0])
    for v in np.flatnonzero(lam > 2):
        state = VoxelState(mu[v], psi[v], lam[v])
        out[v] = uncertainty_sampling(state, dictionary, n, lift, children[v])
    return out


def uncertainty_batch(
    method: str,
    mu: np.ndarray,
    lam: np.ndarray,
    psi: np.ndarray,
    dictionary: Optional[QueryDictionary] = None,
    n: int = 100,
    lift: Optional[PcaTransform] = None,
    seed=None,
) -> np.ndarray:
    method = normalize_method(method)
    if method == "e_opt":
        return e_optimality_batch(lam, psi)
    if method == "d_opt":
        return d_optimality_batch(lam, psi)
    if dictionary is None:
        raise ValueError("sampling uncertainty needs a query dictionary")
    return sampling_uncertainty_batch(mu, lam, psi, dictionary, n, lift, seed)


_METHOD_ALIASES = {
    "sampling": "sampling",
    "e": "e_opt",
    "e_opt": "e_opt",
    "e-opt": "e_opt",
    "d": "d_opt",
    "d_opt": "d_opt",
    "d-opt": "d_opt",
}


def normalize_method(method: str) -> str:
    try:
        return _METHOD_ALIASES[method.lower()]
    except KeyError:
        raise ValueError(f"unknown uncertainty method {method!r}; expected sampling, e or d") from None


def uncertainty_sort_key(values: Sequence[float]) -> np.ndarray:
    """Ascending order of uncertainty with UNDEFINED (and NaN) last."""
    v = np.asarray(values, dtype=np.float64)
    v = np.where(np.isnan(v), UNDEFINED, v)
    return np.argsort(v, kind="stable")
