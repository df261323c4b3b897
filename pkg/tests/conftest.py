import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from placerec import ClusterModel, LocalFeatureSet, normalize_features


def random_feature_set(rng, grid=6, depth=8, image_id="img", labels=None):
    feats = rng.normal(size=(grid, depth))
    return normalize_features(
        LocalFeatureSet(image_id, feats, height=1, width=grid, depth=depth, labels=labels)
    )


def random_model(rng, clusters=3, shadows=2, depth=8, scale=4.0, perturb=0.0):
    reps = rng.normal(size=(clusters, depth))
    reps /= np.linalg.norm(reps, axis=1, keepdims=True)
    shads = rng.normal(size=(clusters, shadows, depth))
    if shadows:
        shads /= np.linalg.norm(shads, axis=2, keepdims=True)
    model = ClusterModel.from_centroids(reps, shads, scale=scale)
    if perturb:
        model = model.with_parameters(
            model.affine_weights + perturb * rng.normal(size=model.affine_weights.shape),
            model.affine_biases + perturb * rng.normal(size=model.affine_biases.shape),
            model.residual_centroids + perturb * rng.normal(size=model.residual_centroids.shape),
        )
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(42)
