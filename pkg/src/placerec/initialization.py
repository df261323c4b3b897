"""Cluster-model initializers.

The normal initializer mimics traditional VLAD: representative centroids
come from k-means over a sampled feature pool and shadow centroids are
placed antipodally (maximally distant on the unit sphere, plus seeded
noise).  The semantic-constrained initializer builds representatives from
static-labeled features only and picks each cluster's shadows from a
candidate pool clustered out of dynamic-labeled features, so clutter
regions start suppressed before any training.
"""

from __future__ import annotations

import numpy as np

from .encoding import DEFAULT_SCALE, ClusterModel
from .errors import InsufficientDynamic, InsufficientStatic, TooFewSamples
from .features import LocalFeatureSet, SemanticPartition, normalize_features

DEFAULT_POOL_SIZE = 50000
_SHADOW_NOISE = 0.1


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def kmeans(
    samples: np.ndarray, k: int, seed, max_iters: int = 100
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding, deterministic given seed.

    Clusters that empty out are re-seeded at the point currently farthest
    from its own centroid.
    """
    samples = np.asarray(samples, dtype=np.float64)
    m = samples.shape[0]
    if m < k:
        raise TooFewSamples(f"{m} samples cannot seed {k} clusters")
    rng = _as_rng(seed)

    centroids = np.empty((k, samples.shape[1]))
    centroids[0] = samples[rng.integers(m)]
    sq_dists = np.sum((samples - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = sq_dists.sum()
        if total > 0:
            idx = rng.choice(m, p=sq_dists / total)
        else:
            idx = rng.integers(m)
        centroids[j] = samples[idx]
        sq_dists = np.minimum(sq_dists, np.sum((samples - centroids[j]) ** 2, axis=1))

    assignments = np.full(m, -1)
    for _ in range(max_iters):
        d2 = (
            np.sum(samples**2, axis=1)[:, None]
            - 2.0 * samples @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_assignments = np.argmin(d2, axis=1)
        own = d2[np.arange(m), new_assignments]
        for j in range(k):
            members = new_assignments == j
            if members.any():
                centroids[j] = samples[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                centroids[j] = samples[far]
                new_assignments[far] = j
                own[far] = 0.0
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    return centroids


def sample_feature_pool(
    sets: list[LocalFeatureSet],
    pool_size: int = DEFAULT_POOL_SIZE,
    seed=0,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw a uniform seeded sample of normalized features across images.

    Returns the sampled features and, when every image carries labels,
    the matching label vector.
    """
    normalized = [normalize_features(fs) for fs in sets]
    feats = np.concatenate([fs.features for fs in normalized], axis=0)
    labels = None
    if all(fs.labels is not None for fs in normalized):
        labels = np.concatenate([fs.labels for fs in normalized], axis=0)
    total = feats.shape[0]
    if total > pool_size:
        rng = _as_rng(seed)
        keep = rng.choice(total, size=pool_size, replace=False)
        keep.sort()
        feats = feats[keep]
        labels = labels[keep] if labels is not None else None
    return feats, labels


def init_normal(
    features: np.ndarray,
    k: int,
    s: int,
    scale: float = DEFAULT_SCALE,
    seed=0,
) -> ClusterModel:
    """VLAD-mimicking initialization over an unlabeled feature pool.

    Each shadow is the unit-normalized antipode of its representative
    plus small seeded noise: the farthest deterministic point on the unit
    sphere, with symmetry broken so shadows of one cluster differ.
    """
    rng = _as_rng(seed)
    reps = kmeans(features, k, rng)
    raw = -reps[:, None, :] + _SHADOW_NOISE * rng.normal(size=(k, s, reps.shape[1]))
    if s > 0:
        raw /= np.linalg.norm(raw, axis=2, keepdims=True)
    return ClusterModel.from_centroids(reps, raw, scale=scale)


def init_semantic(
    features: np.ndarray,
    labels: np.ndarray,
    partition: SemanticPartition,
    k: int,
    s: int,
    n_candidates: int | None = None,
    scale: float = DEFAULT_SCALE,
    seed=0,
) -> ClusterModel:
    """Semantic-constrained initialization over a labeled feature pool.

    Representatives are clustered from static-labeled features only.
    Dynamic-labeled features are clustered into ``n_candidates`` shadow
    candidates (default 2*s*k, capped by the dynamic pool size); each
    cluster takes the S candidates nearest to its representative, ties
    broken by candidate index.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] != labels.shape[0]:
        raise ValueError(f"{features.shape[0]} features vs {labels.shape[0]} labels")
    static_mask = np.isin(labels, list(partition.static_classes))
    dynamic_mask = np.isin(labels, list(partition.dynamic_classes))
    n_static = int(static_mask.sum())
    n_dynamic = int(dynamic_mask.sum())
    if n_static < k:
        raise InsufficientStatic(f"{n_static} static-labeled features cannot seed {k} clusters")
    if s > 0 and n_dynamic < s:
        raise InsufficientDynamic(
            f"{n_dynamic} dynamic-labeled features cannot provide {s} shadows"
        )

    rng = _as_rng(seed)
    reps = kmeans(features[static_mask], k, rng)
    if s == 0:
        shadows = np.empty((k, 0, features.shape[1]))
        return ClusterModel.from_centroids(reps, shadows, scale=scale)

    if n_candidates is None:
        n_candidates = min(2 * s * k, n_dynamic)
    if n_candidates < s:
        raise ValueError(f"n_candidates={n_candidates} is smaller than S={s}")
    n_candidates = min(n_candidates, n_dynamic)
    candidates = kmeans(features[dynamic_mask], n_candidates, rng)

    shadows = np.empty((k, s, features.shape[1]))
    for j in range(k):
        dists = np.linalg.norm(candidates - reps[j], axis=1)
        order = np.argsort(dists, kind="stable")
        shadows[j] = candidates[order[:s]]
    return ClusterModel.from_centroids(reps, shadows, scale=scale)
