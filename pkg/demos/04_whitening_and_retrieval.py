"""Whiten descriptors and check what it does to covariance and retrieval.

PCA whitening decorrelates descriptor components and equalizes variances;
on the training set the projected covariance becomes the identity.  After
truncation to a compact dimension, retrieval runs on the re-normalized
projections.
"""

import numpy as np

from placerec import (
    DEFAULT_PARTITION,
    SyntheticPlaceSpec,
    apply_whitening_batch,
    build_index,
    encode_batch,
    fit_whitening,
    generate_synthetic_dataset,
    init_semantic,
    recall_at,
    sample_feature_pool,
    transform,
)
from placerec.training import split_views_for_eval

spec = SyntheticPlaceSpec(
    num_places=40, views_per_place=4, depth=16, height=6, width=6,
    informative_fraction=0.3, clutter_noise_scale=0.04, view_noise_scale=0.12,
    rng_seed=29,
)
sets, tags = generate_synthetic_dataset(spec)
pool, labels = sample_feature_pool(sets[:120], seed=29)
model = init_semantic(pool, labels, DEFAULT_PARTITION, k=8, s=2, seed=29)

train_vectors = encode_batch(sets[:120], model)
print(f"descriptors: {train_vectors.shape[0]} x {train_vectors.shape[1]}")

# Fit at a compact dimension; the training-set projection decorrelates.
t = fit_whitening(train_vectors, 32)
projected = transform(t, train_vectors)
cov = projected.T @ projected / (projected.shape[0] - 1)
print(f"projected covariance: max |cov - I| = {np.max(np.abs(cov - np.eye(32))):.2e}")

# Retrieval with and without whitening on the held-out views.
eval_sets, eval_tags = sets[120:], tags[120:]
db_idx, query_idx = split_views_for_eval(eval_sets, eval_tags)
db_sets = [eval_sets[i] for i in db_idx]
query_sets = [eval_sets[i] for i in query_idx]
db_tags = [eval_tags[i] for i in db_idx]
query_tags = [eval_tags[i] for i in query_idx]

db_raw = encode_batch(db_sets, model)
query_raw = encode_batch(query_sets, model)
for name, db, queries in (
    ("raw 128-D ", db_raw, query_raw),
    ("whitened 32-D", apply_whitening_batch(t, db_raw), apply_whitening_batch(t, query_raw)),
):
    index = build_index([fs.image_id for fs in db_sets], db, db_tags)
    recall = recall_at(index, queries, query_tags, [1, 5, 10])
    curve = " ".join(f"r@{n}={recall.recalls[n]:.3f}" for n in recall.n_values)
    print(f"{name}: {curve}")
