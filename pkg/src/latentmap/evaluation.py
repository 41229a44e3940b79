"""Metrics, ablations and a synthetic labeled scene for evaluating maps.

The synthetic scene partitions a box of voxels into Voronoi regions, one
category per region. Every category has a random unit anchor embedding and a
point's feature is its category anchor plus Gaussian noise, re-normalized to
unit length. Noise can vary by region (``sigma_spread``) so that per-voxel
uncertainty is heterogeneous.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .compression import PcaTransform
from .inference import (
    UNDEFINED,
    QueryDictionary,
    cosine_scores,
    decode_categories,
    uncertainty_batch,
)
from .kernel import KernelConfig
from .latent_map import DEFAULT_LAM0, DEFAULT_PSI0, LatentMap, ObservationFrame
from .voxel_grid import GridConfig, pack_indices, world_to_indices

logger = logging.getLogger(__name__)


@dataclass
class SceneSpec:
    grid_shape: tuple = (24, 24, 6)
    resolution: float = 0.1
    n_categories: int = 6
    n_regions: int = 12
    feature_dim: int = 16
    n_frames: int = 10
    points_per_frame: int = 2000
    sigma: float = 0.3
    sigma_spread: float = 0.0
    max_anchor_cosine: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.n_categories < 1:
            raise ValueError("scene needs at least one category")
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 1:
            raise ValueError("grid_shape must be three positive integers")
        if self.n_regions < 1 or self.feature_dim < 1:
            raise ValueError("n_regions and feature_dim must be positive")
        if self.sigma < 0 or self.sigma_spread < 0:
            raise ValueError("noise parameters must be non-negative")


@dataclass
class SyntheticScene:
    """Ground truth for a generated scene.

    ``labels[i, j, k]`` is the category of voxel ``(i, j, k)``; ``noise`` holds
    the per-voxel noise scale actually used.
    """

    labels: np.ndarray
    anchors: np.ndarray
    noise: np.ndarray
    resolution: float
    sigma: float
    seed: int

    @property
    def n_categories(self) -> int:
        return self.anchors.shape[0]

    def dictionary(self) -> QueryDictionary:
        return QueryDictionary([f"category_{c}" for c in range(self.n_categories)], self.anchors)

    def labels_at(self, positions: np.ndarray) -> np.ndarray:
        grid = GridConfig(self.resolution, 1)
        idx = world_to_indices(positions, grid)
        return self.labels[idx[:, 0], idx[:, 1], idx[:, 2]]


def random_anchors(n: int, dim: int, max_cosine: float, rng: np.random.Generator, max_tries: int = 10000):
    """Unit vectors with pairwise cosine below ``max_cosine`` (rejection sampling)."""
    anchors: list[np.ndarray] = []
    tries = 0
    while len(anchors) < n:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {n} anchors in {dim} dims below cosine {max_cosine}")
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ a) < max_cosine for a in anchors):
            anchors.append(v)
    return np.array(anchors)


def generate_scene(spec: SceneSpec) -> tuple[SyntheticScene, list[ObservationFrame]]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(s) for s in spec.grid_shape)
    anchors = random_anchors(spec.n_categories, spec.feature_dim, spec.max_anchor_cosine, rng)

    cells = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1).reshape(-1, 3)
    sites = rng.uniform(0, 1, (spec.n_regions, 3)) * np.array(shape)
    region = np.argmin(((cells[:, None, :] + 0.5 - sites[None]) ** 2).sum(-1), axis=1)
    # Every category owns at least one region when there are enough regions.
    region_cat = rng.permutation(np.arange(spec.n_regions) % spec.n_categories)
    labels = region_cat[region].reshape(shape)
    region_noise = spec.sigma * np.exp(rng.uniform(-spec.sigma_spread, spec.sigma_spread, spec.n_regions))
    noise = region_noise[region].reshape(shape)

    frames = []
    n_cells = cells.shape[0]
    for _ in range(spec.n_frames):
        pick = rng.integers(0, n_cells, spec.points_per_frame)
        vox = cells[pick]
        positions = (vox + rng.uniform(0, 1, (spec.points_per_frame, 3))) * spec.resolution
        # Keep points strictly inside their cell despite float rounding.
        positions = np.clip(positions, vox * spec.resolution, np.nextafter((vox + 1) * spec.resolution, 0))
        lab = labels[vox[:, 0], vox[:, 1], vox[:, 2]]
        sig = noise[vox[:, 0], vox[:, 1], vox[:, 2]]
        feats = anchors[lab] + rng.standard_normal((spec.points_per_frame, spec.feature_dim)) * sig[:, None]
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        frames.append(ObservationFrame(positions, feats, labels=lab))
    scene = SyntheticScene(labels, anchors, noise, spec.resolution, spec.sigma, spec.seed)
    return scene, frames


def holdout_split(frames: Sequence[ObservationFrame], fraction: float = 0.8, seed=0):
    """Point-level split into training frames and one test frame.

    Exactly ``round(fraction * N)`` points go to training; frame membership of
    the training points is preserved.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    sizes = [len(f) for f in frames]
    total = sum(sizes)
    n_train = int(round(fraction * total))
    if n_train >= total:
        raise ValueError("split leaves an empty test set")
    rng = np.random.default_rng(seed)
    is_train = np.zeros(total, dtype=bool)
    is_train[rng.permutation(total)[:n_train]] = True
    train, test_parts = [], []
    start = 0
    for f, n in zip(frames, sizes):
        mask = is_train[start : start + n]
        train.append(f.subset(mask))
        test_parts.append(f.subset(~mask))
        start += n
    return train, ObservationFrame.concatenate(test_parts)


@dataclass
class MetricReport:
    """Point-level segmentation metrics.

    ``confusion[t, p]`` counts points of true class ``t`` predicted as ``p``;
    the extra last column counts points with no prediction (unobserved).
    """

    accuracy: float
    iou: np.ndarray
    miou: float
    support: np.ndarray
    confusion: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def unpredicted(self) -> int:
        return int(self.confusion[:, -1].sum())


def metric_report(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> MetricReport:
    """Accuracy and IoU; ``pred == -1`` marks a point with no prediction (always wrong)."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError("predictions and labels differ in shape")
    if labels.size == 0:
        raise ValueError("empty evaluation set")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label outside class range")
    col = np.where(pred < 0, n_classes, pred)
    confusion = np.bincount(labels * (n_classes + 1) + col, minlength=n_classes * (n_classes + 1))
    confusion = confusion.reshape(n_classes, n_classes + 1)
    tp = np.diag(confusion[:, :n_classes]).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion[:, :n_classes].sum(axis=0)
    union = support + predicted - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = support > 0
    miou = float(np.mean(iou[present]))
    return MetricReport(float(tp.sum() / labels.size), iou, miou, support, confusion)


def _voxel_rows(m: LatentMap, positions: np.ndarray) -> np.ndarray:
    return m.rows_for_keys(pack_indices(world_to_indices(positions, m.grid)))


def predict_points(m: LatentMap, positions: np.ndarray, dictionary: QueryDictionary, lift=None):
    """Category of each point's voxel, -1 where lam <= 1 or undecodable."""
    rows = _voxel_rows(m, positions)
    pred = np.full(rows.size, -1, dtype=np.int64)
    ok = rows >= 0
    ok[ok] = m.lam[rows[ok]] > 1
    if ok.any():
        cat, _ = decode_categories(m.mu[rows[ok]].astype(np.float64), dictionary, lift)
        pred[ok] = cat
    return pred


def evaluate_map(m: LatentMap, test: ObservationFrame, dictionary: QueryDictionary, lift=None) -> MetricReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    if test.labels is None:
        raise ValueError("test points carry no labels")
    pred = predict_points(m, test.positions, dictionary, lift)
    return metric_report(pred, test.labels, len(dictionary))


def coverage(m: LatentMap, positions: np.ndarray) -> float:
    """Fraction of positions whose voxel has lam > 1."""
    rows = _voxel_rows(m, positions)
    ok = rows >= 0
    ok[ok] = m.lam[rows[ok]] > 1
    return float(ok.mean()) if rows.size else 0.0


def raw_report(test: ObservationFrame, dictionary: QueryDictionary, lift=None) -> MetricReport:
    """Metrics of decoding each point's own feature, without any map."""
    cat, _ = decode_categories(test.features, dictionary, lift)
    return metric_report(cat, test.labels, len(dictionary))


def build_map(
    frames: Sequence[ObservationFrame],
    grid: GridConfig,
    kernel: KernelConfig,
    lam0: float = DEFAULT_LAM0,
    psi0: float = DEFAULT_PSI0,
    encoder: Optional[PcaTransform] = None,
    dtype=np.float32,
) -> LatentMap:
    dim = encoder.reduced_dim if encoder is not None else frames[0].feature_dim
    m = LatentMap(grid, kernel, dim, lam0, psi0, dtype)
    for f in frames:
        if encoder is not None and len(f):
            f = ObservationFrame(f.positions, encoder.encode(f.features), f.ranges, f.labels)
        m.update(f)
    return m


def subsample(frames: Sequence[ObservationFrame], density: float, seed=0) -> list[ObservationFrame]:
    """Keep each point independently with probability ``density``."""
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    if density == 1:
        return list(frames)
    rng = np.random.default_rng(seed)
    return [f.subset(rng.random(len(f)) < density) for f in frames]


@dataclass
class AblationRow:
    density: float
    filter_size: int
    report: MetricReport
    coverage: float


def sparsity_ablation(
    train: Sequence[ObservationFrame],
    test: ObservationFrame,
    dictionary: QueryDictionary,
    densities: Sequence[float],
    filter_sizes: Sequence[int],
    resolution: float = 0.1,
    kernel_length: float = 0.5,
    lam0: float = DEFAULT_LAM0,
    psi0: float = DEFAULT_PSI0,
    seed=0,
) -> list[AblationRow]:
    """One map per (density, filter size); all filter sizes share each density's subsample."""
    rows = []
    for density in densities:
        sub = subsample(train, density, seed)
        for k in filter_sizes:
            m = build_map(sub, GridConfig(resolution, k), KernelConfig(kernel_length), lam0, psi0)
            rep = evaluate_map(m, test, dictionary)
            rows.append(AblationRow(float(density), int(k), rep, coverage(m, test.positions)))
            logger.info("density=%g k=%d acc=%.4f miou=%.4f", density, k, rep.accuracy, rep.miou)
    return rows


def point_uncertainty(
    m: LatentMap,
    positions: np.ndarray,
    method: str,
    dictionary: Optional[QueryDictionary] = None,
    lift=None,
    n_samples: int = 100,
    seed=0,
) -> np.ndarray:
    """Uncertainty of each point's voxel; unallocated voxels are UNDEFINED."""
    rows = _voxel_rows(m, positions)
    out = np.full(rows.size, UNDEFINED)
    used = np.unique(rows[rows >= 0])
    if used.size:
        u = uncertainty_batch(
            method,
            m.mu[used].astype(np.float64),
            m.lam[used],
            m.psi_diag[used].astype(np.float64),
            dictionary,
            n_samples,
            lift,
            seed,
        )
        lookup = dict(zip(used.tolist(), u.tolist()))
        hit = rows >= 0
        out[hit] = [lookup[r] for r in rows[hit].tolist()]
    return out


@dataclass
class CurvePoint:
    fraction_removed: float
    accuracy: float
    miou: float
    n_points: int


def sparsification_from_predictions(
    pred: np.ndarray, labels: np.ndarray, uncertainty: np.ndarray, n_classes: int, bins: int
) -> list[CurvePoint]:
    """Metrics after cumulatively dropping the most uncertain of ``bins`` equal bins.

    Points are ranked by uncertainty, most uncertain first (UNDEFINED before
    any finite value, ties by original order). Returns ``bins`` points with
    fractions ``0, 1/bins, ..., (bins-1)/bins``; the all-removed end is omitted
    because its metrics are undefined.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    u = np.asarray(uncertainty, dtype=np.float64)
    u = np.where(np.isnan(u), UNDEFINED, u)
    order = np.argsort(-u, kind="stable")
    chunks = np.array_split(order, bins)
    curve = []
    removed = 0
    for b in range(bins):
        keep = np.concatenate(chunks[b:])
        rep = metric_report(pred[keep], labels[keep], n_classes)
        curve.append(CurvePoint(removed / len(order), rep.accuracy, rep.miou, keep.size))
        removed += chunks[b].size
    return curve


def sparsification_curve(
    m: LatentMap,
    test: ObservationFrame,
    dictionary: QueryDictionary,
    method: str,
    bins: int = 10,
    lift=None,
    n_samples: int = 100,
    seed=0,
) -> list[CurvePoint]:
    pred = predict_points(m, test.positions, dictionary, lift)
    u = point_uncertainty(m, test.positions, method, dictionary, lift, n_samples, seed)
    return sparsification_from_predictions(pred, test.labels, u, len(dictionary), bins)


def uncertainty_correlation(
    m: LatentMap,
    methods: tuple[str, str],
    dictionary: Optional[QueryDictionary] = None,
    lift=None,
    n_samples: int = 100,
    seed=0,
    min_voxels: int = 100,
) -> float:
    """Spearman rank correlation of two per-voxel uncertainty measures."""
    a = uncertainty_batch(methods[0], m.mu, m.lam, m.psi_diag, dictionary, n_samples, lift, seed)
    if methods[1] == methods[0]:
        b = a
    else:
        b = uncertainty_batch(methods[1], m.mu, m.lam, m.psi_diag, dictionary, n_samples, lift, seed)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < min_voxels:
        raise ValueError(f"only {int(ok.sum())} voxels with defined uncertainty; need {min_voxels}")
    return float(stats.spearmanr(a[ok], b[ok]).statistic)


@dataclass
class ExperimentConfig:
    """Flat key set for the ``eval`` command's config file."""

    grid_shape: tuple = (24, 24, 6)
    resolution: float = 0.1
    n_categories: int = 6
    n_regions: int = 12
    feature_dim: int = 16
    n_frames: int = 10
    points_per_frame: int = 2000
    sigma: float = 0.3
    sigma_spread: float = 0.0
    seed: int = 0
    kernel_length: float = 0.5
    filter_size: int = 3
    lam0: float = DEFAULT_LAM0
    psi0: float = DEFAULT_PSI0
    train_fraction: float = 0.8
    densities: list = field(default_factory=lambda: [0.01, 0.1, 1.0])
    filter_sizes: tuple = (1, 3)
    bins: int = 10
    n_samples: int = 100

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            grid_shape=tuple(self.grid_shape),
            resolution=self.resolution,
            n_categories=self.n_categories,
            n_regions=self.n_regions,
            feature_dim=self.feature_dim,
            n_frames=self.n_frames,
            points_per_frame=self.points_per_frame,
            sigma=self.sigma,
            sigma_spread=self.sigma_spread,
            seed=self.seed,
        )

    def validate(self) -> None:
        self.scene_spec().validate()
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
