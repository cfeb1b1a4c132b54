"""Unsupervised diagnostics on frozen features: k-means, partition metrics,
cluster-to-label matching, PCA token overlays and the Fréchet distance."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from scipy import linalg
from scipy.optimize import linear_sum_assignment
from sklearn.decomposition import PCA
from sklearn.metrics import (
    adjusted_rand_score,
    normalized_mutual_info_score,
    silhouette_score,
    v_measure_score,
)
from sklearn.metrics.cluster import contingency_matrix

from diffprobe.hashing import derive_seed, derived_rng
from diffprobe.image_io import write_pgm, write_ppm

__all__ = [
    "ClusterError",
    "ClusterMetrics",
    "ClusterReport",
    "AssignmentMap",
    "ClusterSummary",
    "PCATokens",
    "kmeans",
    "cluster_metrics",
    "hungarian",
    "match_clusters",
    "majority_vote_mapping",
    "cluster_runs",
    "write_cluster_report",
    "pca_tokens",
    "save_pca_overlay",
    "frechet_diagnostic",
    "pooled_pixel_features",
]

FRECHET_EPS = 1e-6


class ClusterError(Exception):
    """Raised on invalid clustering inputs or numerically failed diagnostics."""

    pass


@dataclass(frozen=True)
class ClusterMetrics:
    nmi: float
    ari: float
    purity: float
    v_measure: float
    silhouette: float


@dataclass
class ClusterReport:
    k: int
    assignments: np.ndarray = field(repr=False)
    centroids: np.ndarray = field(repr=False)
    inertia: float
    inertia_history: List[float]
    restarts: int
    seed: int
    metrics: Optional[ClusterMetrics] = None


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _seed_centroids(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy distance-weighted seeding: each new centre is drawn ∝ squared distance."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            index = int(rng.choice(remaining))
        chosen.append(index)
        closest = np.minimum(closest, _sq_distances(X, X[[index]])[:, 0])
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    history = []
    for _ in range(max_iter):
        distances = _sq_distances(X, centroids)
        assignments = distances.argmin(1)
        history.append(float(distances[np.arange(len(X)), assignments].sum()))

        updated = centroids.copy()
        for j in range(len(centroids)):
            members = X[assignments == j]
            if len(members):
                updated[j] = members.mean(0)
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(1)).max())
        centroids = updated
        if shift <= tol:
            break

    distances = _sq_distances(X, centroids)
    assignments = distances.argmin(1)
    inertia = float(distances[np.arange(len(X)), assignments].sum())
    history.append(inertia)
    return assignments, centroids, inertia, history


def kmeans(
    X: np.ndarray,
    k: int,
    restarts: int = 5,
    max_iter: int = 300,
    tol: float = 1e-4,
    seed: int = 0,
) -> ClusterReport:
    """Lloyd's algorithm from ``restarts`` seeded initializations; the lowest inertia wins."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ClusterError(f"k must be >= 1, got {k}")
    if k > n:
        raise ClusterError(f"k={k} exceeds the number of points ({n})")

    best = None
    for restart in range(restarts):
        rng = derived_rng(seed, "kmeans", restart)
        result = _lloyd(X, _seed_centroids(X, k, rng), max_iter, tol)
        if best is None or result[2] < best[2]:
            best = result
    assignments, centroids, inertia, history = best
    logger.debug(f"k-means k={k}: inertia {inertia:.6g} after {len(history) - 1} iterations")
    return ClusterReport(
        k=k,
        assignments=assignments.astype(np.int64),
        centroids=centroids,
        inertia=inertia,
        inertia_history=history,
        restarts=restarts,
        seed=seed,
    )


def cluster_metrics(
    assignments: Sequence[int],
    labels: Sequence[int],
    X: np.ndarray,
    silhouette_sample: Optional[int] = None,
    seed: int = 0,
) -> ClusterMetrics:
    """NMI (arithmetic normalization), ARI, purity, V-measure and Euclidean silhouette."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if len(assignments) != len(labels) or len(labels) != len(X):
        raise ClusterError(
            f"Length mismatch: {len(assignments)} assignments, {len(labels)} labels, "
            f"{len(X)} points"
        )

    table = contingency_matrix(labels, assignments)
    purity = float(table.max(axis=0).sum() / len(labels))

    n_clusters = len(np.unique(assignments))
    if 2 <= n_clusters <= len(X) - 1:
        sample = silhouette_sample if silhouette_sample and len(X) > silhouette_sample else None
        silhouette = float(
            silhouette_score(
                X,
                assignments,
                metric="euclidean",
                sample_size=sample,
                random_state=derive_seed(seed, "silhouette") % 2**32 if sample else None,
            )
        )
    else:
        logger.warning(f"Silhouette undefined for {n_clusters} clusters on {len(X)} points")
        silhouette = float("nan")

    return ClusterMetrics(
        nmi=float(normalized_mutual_info_score(labels, assignments, average_method="arithmetic")),
        ari=float(adjusted_rand_score(labels, assignments)),
        purity=purity,
        v_measure=float(v_measure_score(labels, assignments)),
        silhouette=silhouette,
    )


@dataclass(frozen=True)
class AssignmentMap:
    mapping: Dict[int, int]
    total_cost: float
    matched: int


def hungarian(cost: np.ndarray) -> AssignmentMap:
    """Minimum-cost perfect matching on a square cost matrix (row → column)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ClusterError(f"Hungarian matching needs a square matrix, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ClusterError("Hungarian cost matrix contains non-finite values")
    rows, cols = linear_sum_assignment(cost)
    return AssignmentMap(
        mapping={int(r): int(c) for r, c in zip(rows, cols)},
        total_cost=float(cost[rows, cols].sum()),
        matched=len(rows),
    )


def _cluster_by_label(assignments: np.ndarray, labels: np.ndarray, size: int) -> np.ndarray:
    table = np.zeros((size, size), dtype=np.int64)
    np.add.at(table, (assignments, labels), 1)
    return table


def match_clusters(assignments: Sequence[int], labels: Sequence[int]) -> AssignmentMap:
    """Hungarian cluster→label matching maximizing agreement; ``matched`` counts agreeing items."""
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    size = int(max(assignments.max(initial=0), labels.max(initial=0))) + 1
    table = _cluster_by_label(assignments, labels, size)
    result = hungarian(-table)
    matched = int(sum(table[c, l] for c, l in result.mapping.items()))
    return AssignmentMap(mapping=result.mapping, total_cost=result.total_cost, matched=matched)


def majority_vote_mapping(assignments: Sequence[int], labels: Sequence[int]) -> Dict[int, int]:
    """Each cluster maps to its most frequent true label (smallest label on ties)."""
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    size = int(max(assignments.max(initial=0), labels.max(initial=0))) + 1
    table = _cluster_by_label(assignments, labels, size)
    return {int(c): int(table[c].argmax()) for c in np.unique(assignments)}


@dataclass
class ClusterSummary:
    k: int
    runs: List[Dict[str, float]]
    mean: Dict[str, float]
    std: Dict[str, float]
    hungarian_accuracy: float
    majority_vote_accuracy: float
    mapping: Dict[int, int]
    assignments: np.ndarray = field(repr=False)


def cluster_runs(
    X: np.ndarray,
    labels: Sequence[int],
    k: int,
    runs: int = 5,
    restarts: int = 5,
    max_iter: int = 300,
    tol: float = 1e-4,
    seed: int = 0,
    silhouette_sample: Optional[int] = 5000,
) -> ClusterSummary:
    """Repeat k-means with derived seeds; keep per-run metrics, their mean and std."""
    labels = np.asarray(labels, dtype=np.int64)
    per_run, reports = [], []
    for run in range(runs):
        report = kmeans(X, k, restarts, max_iter, tol, seed=derive_seed(seed, "run", run))
        report.metrics = cluster_metrics(
            report.assignments, labels, X, silhouette_sample, seed=seed
        )
        reports.append(report)
        per_run.append({"run": run, "inertia": report.inertia, **asdict(report.metrics)})
        logger.info(
            f"k-means run {run}: NMI {report.metrics.nmi:.4f} ARI {report.metrics.ari:.4f} "
            f"purity {report.metrics.purity:.4f}"
        )

    names = list(asdict(reports[0].metrics))
    mean = {name: float(np.nanmean([r[name] for r in per_run])) for name in names}
    std = {name: float(np.nanstd([r[name] for r in per_run])) for name in names}

    best = min(reports, key=lambda r: r.inertia)
    matching = match_clusters(best.assignments, labels)
    votes = majority_vote_mapping(best.assignments, labels)
    voted = np.array([votes[a] for a in best.assignments])
    return ClusterSummary(
        k=k,
        runs=per_run,
        mean=mean,
        std=std,
        hungarian_accuracy=matching.matched / len(labels),
        majority_vote_accuracy=float((voted == labels).mean()),
        mapping=matching.mapping,
        assignments=best.assignments,
    )


def _json_number(value: float):
    return None if value is None or not np.isfinite(value) else value


def write_cluster_report(summary: ClusterSummary, path: Path, extra: Optional[Dict] = None) -> Path:
    payload = {
        "k": summary.k,
        "runs": [{k: _json_number(v) for k, v in run.items()} for run in summary.runs],
        "mean": {k: _json_number(v) for k, v in summary.mean.items()},
        "std": {k: _json_number(v) for k, v in summary.std.items()},
        "hungarian_accuracy": summary.hungarian_accuracy,
        "majority_vote_accuracy": summary.majority_vote_accuracy,
        "hungarian_mapping": {str(c): l for c, l in summary.mapping.items()},
        "assignments": summary.assignments.tolist(),
        **(extra or {}),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


@dataclass(frozen=True)
class PCATokens:
    rgb: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    explained_variance_ratio: np.ndarray
    components: np.ndarray = field(repr=False)


def pca_tokens(
    feature_maps, components: int = 3, mask_quantile: float = 0.5
) -> PCATokens:
    """
    Project every spatial token of a (B, C, H, W) batch onto its leading
    principal components and scale each to [0, 1].

    ``mask`` marks pixels whose first component falls below the
    ``mask_quantile`` quantile of the batch.
    """
    maps = feature_maps.detach().cpu().numpy() if torch.is_tensor(feature_maps) else feature_maps
    maps = np.asarray(maps, dtype=np.float64)
    b, c, h, w = maps.shape
    tokens = maps.transpose(0, 2, 3, 1).reshape(-1, c)
    if len(tokens) < components:
        raise ClusterError(f"PCA needs at least {components} tokens, got {len(tokens)}")

    centered = tokens - tokens.mean(0)
    if np.allclose(centered, 0.0):
        logger.warning("All feature tokens are identical; PCA overlay is blank and fully masked")
        return PCATokens(
            rgb=np.zeros((b, h, w, components)),
            mask=np.ones((b, h, w), dtype=bool),
            explained_variance_ratio=np.zeros(components),
            components=np.zeros((components, c)),
        )

    rank = int(np.linalg.matrix_rank(centered))
    usable = min(components, rank, c)
    if usable < components:
        logger.warning(
            f"Feature tokens have rank {rank} < {components}; padding missing channels with zeros"
        )
    pca = PCA(n_components=usable, svd_solver="full")
    projected = pca.fit_transform(tokens)

    low, high = projected.min(0), projected.max(0)
    span = np.where(high > low, high - low, 1.0)
    scaled = np.zeros((len(tokens), components))
    scaled[:, :usable] = (projected - low) / span

    first = projected[:, 0]
    mask = first < np.quantile(first, mask_quantile)
    ratio = np.zeros(components)
    ratio[:usable] = pca.explained_variance_ratio_
    comps = np.zeros((components, c))
    comps[:usable] = pca.components_
    return PCATokens(
        rgb=scaled.reshape(b, h, w, components),
        mask=mask.reshape(b, h, w),
        explained_variance_ratio=ratio,
        components=comps,
    )


def save_pca_overlay(
    tokens: PCATokens, out_dir: Path, images: Optional[np.ndarray] = None
) -> List[Path]:
    """Write per-image ``_pca.ppm`` (masked pixels black), ``_mask.pgm`` and, when given, ``_input.pgm``."""
    written = []
    for i, (rgb, mask) in enumerate(zip(tokens.rgb, tokens.mask)):
        overlay = np.where(mask[..., None], 0.0, rgb[..., :3])
        if images is not None:
            scale = images.shape[-1] // overlay.shape[0]
            overlay = overlay.repeat(scale, 0).repeat(scale, 1)
            mask = mask.repeat(scale, 0).repeat(scale, 1)
            written.append(write_pgm(out_dir / f"{i:03d}_input.pgm", images[i, 0]))
        written.append(write_ppm(out_dir / f"{i:03d}_pca.ppm", overlay))
        written.append(write_pgm(out_dir / f"{i:03d}_mask.pgm", (~mask).astype(np.float64)))
    return written


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_diagnostic(
    features_a: np.ndarray, features_b: np.ndarray, eps: float = FRECHET_EPS
) -> float:
    """
    Fréchet distance between Gaussian fits of two feature populations:
    ‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½), with εI added to both covariances.

    tr((ΣaΣb)^½) is evaluated as tr((Σa^½ Σb Σa^½)^½) through symmetric
    eigendecompositions.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ClusterError(f"Feature shapes do not match: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ClusterError(f"Fréchet diagnostic needs >= 2 samples per set, got {len(a)}, {len(b)}")

    dim = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    sigma_a = np.atleast_2d(np.cov(a, rowvar=False)) + eps * np.eye(dim)
    sigma_b = np.atleast_2d(np.cov(b, rowvar=False)) + eps * np.eye(dim)

    root_a = _sqrt_psd(sigma_a)
    middle = root_a @ sigma_b @ root_a
    middle = (middle + middle.T) / 2.0
    tr_covmean = np.sqrt(np.clip(linalg.eigvalsh(middle), 0.0, None)).sum()

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_covmean)
    if not np.isfinite(value):
        raise ClusterError(
            "Fréchet diagnostic is not finite; covariances are badly conditioned "
            f"(dim={dim}, n={len(a)}, m={len(b)})"
        )
    return max(value, 0.0)


def pooled_pixel_features(images, grid: int = 8) -> np.ndarray:
    """Average-pool (n, 1, H, W) images to grid×grid and flatten."""
    x = images if torch.is_tensor(images) else torch.from_numpy(np.asarray(images))
    pooled = F.adaptive_avg_pool2d(x.to(torch.float64), grid)
    return pooled.flatten(1).numpy()
