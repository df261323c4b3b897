"""Weakly supervised metric learning of the cluster-model parameters.

The trainable parameters are the affine weights, affine biases, and the
residual centroids.  Tuples of (query, best positive, hardest negatives)
are mined from geotags and current descriptor distances, the loss is the
mean triplet ranking loss over a tuple's negatives with squared
descriptor distances, and gradients are exact analytic derivatives
through the final L2 norm, the intra-normalization, the residual
aggregation, and both softmaxes.  A central-finite-difference checker
validates the analytic path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .encoding import (
    ClusterModel,
    _response_logits,
    _softmax,
    _weighted_residuals,
    encode_batch,
)
from .errors import DegenerateDescriptor, NoPositive
from .evaluation import build_index, recall_at
from .features import GeoTag, LocalFeatureSet, group_places, normalize_features


@dataclass(frozen=True)
class SgdConfig:
    """Optimizer and mining hyperparameters."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    margin: float = 0.1
    epochs: int = 30
    lr_halving_period: int = 5
    early_stop_patience: int = 10
    n_neg: int = 10
    rng_seed: int = 0
    positive_radius: float = 10.0
    negative_radius: float = 25.0

    def __post_init__(self):
        for name in (
            "learning_rate",
            "margin",
            "epochs",
            "lr_halving_period",
            "early_stop_patience",
            "n_neg",
            "positive_radius",
            "negative_radius",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be nonnegative")


@dataclass(frozen=True)
class TrainingTuple:
    query_id: str
    positive_id: str
    negative_ids: tuple[str, ...]


class Gradients(NamedTuple):
    """Gradients w.r.t. affine weights, affine biases, residual centroids."""

    weights: np.ndarray  # (K, S+1, D)
    biases: np.ndarray  # (K, S+1)
    residuals: np.ndarray  # (K, D)


def triplet_loss(dq_p: float, dq_n: float, margin: float) -> float:
    """Hinge on squared descriptor distances: max(dq_p - dq_n + margin, 0)."""
    return max(dq_p - dq_n + margin, 0.0)


def tuple_loss(
    query: np.ndarray,
    positive: np.ndarray,
    negatives: np.ndarray,
    margin: float,
) -> float:
    """Mean triplet loss of one tuple given fully normalized descriptors."""
    dq_p = float(np.sum((query - positive) ** 2))
    dq_n = np.sum((query - negatives) ** 2, axis=1)
    return float(np.mean(np.maximum(dq_p - dq_n + margin, 0.0)))


# ---------------------------------------------------------------------------
# Forward cache and analytic backward
# ---------------------------------------------------------------------------


@dataclass
class _ForwardCache:
    features: np.ndarray  # (N, D), unit rows
    alpha: np.ndarray  # (N, K)
    beta_full: np.ndarray  # (N, K, S+1)
    weights: np.ndarray  # (N, K) alpha*beta
    vlad: np.ndarray  # (K, D)
    block_norms: np.ndarray  # (K,)
    intra: np.ndarray  # (K, D), unit or zero rows
    total_norm: float
    descriptor: np.ndarray  # (K*D,), unit


def _forward_cached(fs: LocalFeatureSet, model: ClusterModel) -> _ForwardCache:
    fs = normalize_features(fs)
    logits = _response_logits(fs.features, model)
    alpha = _softmax(logits[:, :, 0], axis=1)
    beta_full = _softmax(logits, axis=2)
    weights = alpha * beta_full[:, :, 0]
    vlad = _weighted_residuals(fs.features, weights, model.residual_centroids)
    block_norms = np.linalg.norm(vlad, axis=1)
    safe = np.where(block_norms > 0.0, block_norms, 1.0)
    intra = vlad / safe[:, None]
    total = float(np.linalg.norm(intra))
    if total == 0.0:
        raise DegenerateDescriptor("descriptor is identically zero")
    return _ForwardCache(
        features=fs.features,
        alpha=alpha,
        beta_full=beta_full,
        weights=weights,
        vlad=vlad,
        block_norms=block_norms,
        intra=intra,
        total_norm=total,
        descriptor=(intra / total).reshape(-1),
    )


def _backward_image(
    cache: _ForwardCache, model: ClusterModel, grad_descriptor: np.ndarray
) -> Gradients:
    """Backpropagate a descriptor gradient to the trainable parameters."""
    k, d = cache.vlad.shape
    f = cache.descriptor
    # Global L2 normalization: f = y / |y|.
    g_y = (grad_descriptor - np.dot(grad_descriptor, f) * f) / cache.total_norm
    g_y = g_y.reshape(k, d)
    # Intra-normalization per block (zero blocks pass gradients through as zero).
    inner = np.sum(g_y * cache.intra, axis=1, keepdims=True)
    safe = np.where(cache.block_norms > 0.0, cache.block_norms, 1.0)[:, None]
    g_vlad = np.where(
        (cache.block_norms > 0.0)[:, None], (g_y - inner * cache.intra) / safe, 0.0
    )
    # Aggregation V_k = sum_i weights_ik (x_i - rc_k).
    g_residuals = -cache.weights.sum(axis=0)[:, None] * g_vlad
    proj = cache.features @ g_vlad.T - np.sum(g_vlad * model.residual_centroids, axis=1)[None, :]
    g_alpha = cache.beta_full[:, :, 0] * proj
    g_beta = cache.alpha * proj
    # Softmax over clusters feeding alpha.
    g_logit0 = cache.alpha * (g_alpha - np.sum(g_alpha * cache.alpha, axis=1, keepdims=True))
    # Softmax over each cluster's channels; only channel 0 feeds the loss.
    beta0 = cache.beta_full[:, :, 0]
    g_logits = -(g_beta * beta0)[:, :, None] * cache.beta_full
    g_logits[:, :, 0] += g_beta * beta0 + g_logit0
    g_weights = np.einsum("nks,nd->ksd", g_logits, cache.features)
    g_biases = g_logits.sum(axis=0)
    return Gradients(weights=g_weights, biases=g_biases, residuals=g_residuals)


def tuple_forward_backward(
    query: LocalFeatureSet,
    positive: LocalFeatureSet,
    negatives: list[LocalFeatureSet],
    model: ClusterModel,
    margin: float,
) -> tuple[float, Gradients]:
    """Loss and analytic gradients of one tuple.

    Hinge-inactive triplets contribute nothing; features are constants.
    """
    n_neg = len(negatives)
    caches = [_forward_cached(fs, model) for fs in [query, positive, *negatives]]
    f_q, f_p = caches[0].descriptor, caches[1].descriptor
    dq_p = float(np.sum((f_q - f_p) ** 2))
    loss = 0.0
    g_q = np.zeros_like(f_q)
    g_p = np.zeros_like(f_p)
    grads = Gradients(
        weights=np.zeros_like(model.affine_weights),
        biases=np.zeros_like(model.affine_biases),
        residuals=np.zeros_like(model.residual_centroids),
    )
    for cache_n in caches[2:]:
        f_n = cache_n.descriptor
        slack = dq_p - float(np.sum((f_q - f_n) ** 2)) + margin
        if slack <= 0.0:
            continue
        loss += slack
        g_q += (2.0 / n_neg) * (f_n - f_p)
        g_p += (2.0 / n_neg) * (f_p - f_q)
        g_n = (2.0 / n_neg) * (f_q - f_n)
        for a, b in zip(grads, _backward_image(cache_n, model, g_n)):
            a += b
    for cache, g in ((caches[0], g_q), (caches[1], g_p)):
        if np.any(g):
            for a, b in zip(grads, _backward_image(cache, model, g)):
                a += b
    return loss / n_neg, grads


def tuple_loss_forward(
    query: LocalFeatureSet,
    positive: LocalFeatureSet,
    negatives: list[LocalFeatureSet],
    model: ClusterModel,
    margin: float,
) -> float:
    """Forward-only tuple loss (used by the finite-difference oracle)."""
    f_q = _forward_cached(query, model).descriptor
    f_p = _forward_cached(positive, model).descriptor
    f_n = np.stack([_forward_cached(fs, model).descriptor for fs in negatives])
    return tuple_loss(f_q, f_p, f_n, margin)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def finite_difference_gradients(
    query: LocalFeatureSet,
    positive: LocalFeatureSet,
    negatives: list[LocalFeatureSet],
    model: ClusterModel,
    margin: float,
    step: float = 1e-5,
) -> Gradients:
    """Central finite differences of the tuple loss over every parameter."""

    def loss_at(weights, biases, residuals):
        probe = model.with_parameters(weights, biases, residuals)
        return tuple_loss_forward(query, positive, negatives, probe, margin)

    tensors = {
        "weights": np.array(model.affine_weights),
        "biases": np.array(model.affine_biases),
        "residuals": np.array(model.residual_centroids),
    }
    grads = {}
    for name, base in tensors.items():
        grad = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            up = loss_at(tensors["weights"], tensors["biases"], tensors["residuals"])
            flat[j] = original - step
            down = loss_at(tensors["weights"], tensors["biases"], tensors["residuals"])
            flat[j] = original
            gflat[j] = (up - down) / (2.0 * step)
        grads[name] = grad
    return Gradients(grads["weights"], grads["biases"], grads["residuals"])


@dataclass
class GradCheckInstance:
    seed: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    instances: list[GradCheckInstance]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(inst.max_rel_error for inst in self.instances)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _random_instance(
    rng: np.random.Generator,
    depth: int,
    clusters: int,
    shadows: int,
    grid: int,
    n_neg: int,
):
    def image(idx: int) -> LocalFeatureSet:
        feats = rng.normal(size=(grid, depth))
        return normalize_features(
            LocalFeatureSet(f"img{idx}", feats, height=1, width=grid, depth=depth)
        )

    reps = rng.normal(size=(clusters, depth))
    reps /= np.linalg.norm(reps, axis=1, keepdims=True)
    shads = rng.normal(size=(clusters, shadows, depth))
    if shadows:
        shads /= np.linalg.norm(shads, axis=2, keepdims=True)
    model = ClusterModel.from_centroids(reps, shads, scale=float(rng.uniform(2.0, 8.0)))
    # Kick the parameters off the initialization manifold so the check is generic.
    model = model.with_parameters(
        model.affine_weights + 0.2 * rng.normal(size=model.affine_weights.shape),
        model.affine_biases + 0.2 * rng.normal(size=model.affine_biases.shape),
        model.residual_centroids + 0.2 * rng.normal(size=model.residual_centroids.shape),
    )
    images = [image(i) for i in range(2 + n_neg)]
    return images[0], images[1], images[2:], model


def gradient_check(
    seed: int,
    trials: int = 20,
    depth: int = 8,
    clusters: int = 4,
    shadows: int = 2,
    grid: int = 6,
    n_neg: int = 2,
    margin: float = 0.1,
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic and central-finite-difference gradients.

    Instances are resampled (deterministically) until the hinge is active
    for at least one triplet and no triplet sits within 1e-3 of the kink,
    where finite differences are invalid.  The per-parameter relative
    error divides by ``max(|analytic|, |numeric|, 1e-3 * max(1, |g|_inf))``
    so that finite-difference noise on exponentially small entries is not
    amplified into spurious failures.
    """
    instances = []
    for t in range(trials):
        attempt = 0
        while True:
            rng = np.random.default_rng([seed, t, attempt])
            query, positive, negatives, model = _random_instance(
                rng, depth, clusters, shadows, grid, n_neg
            )
            f_q = _forward_cached(query, model).descriptor
            f_p = _forward_cached(positive, model).descriptor
            dq_p = float(np.sum((f_q - f_p) ** 2))
            slacks = [
                dq_p - float(np.sum((f_q - _forward_cached(n, model).descriptor) ** 2)) + margin
                for n in negatives
            ]
            if any(s > 1e-3 for s in slacks) and all(abs(s) > 1e-3 for s in slacks):
                break
            attempt += 1
            if attempt > 100:
                raise RuntimeError("could not condition a gradcheck instance")
        _, analytic = tuple_forward_backward(query, positive, negatives, model, margin)
        numeric = finite_difference_gradients(query, positive, negatives, model, margin, step)
        worst = 0.0
        for a, n in zip(analytic, numeric):
            floor = 1e-3 * max(1.0, float(np.max(np.abs(n))))
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
        instances.append(GradCheckInstance(seed=t, max_rel_error=worst))
    return GradCheckReport(instances=instances, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Tuple mining
# ---------------------------------------------------------------------------


def mine_tuples(
    ids: list[str],
    descriptors: np.ndarray,
    geotags: list[GeoTag],
    config: SgdConfig,
) -> tuple[list[TrainingTuple], int]:
    """Mine (query, best positive, hardest negatives) tuples.

    The positive is the geographically potential positive (within the
    positive radius) with the smallest descriptor distance; negatives are
    the hardest among definite negatives (beyond the negative radius).
    Distance ties break by image id.  Queries without any potential
    positive are skipped and counted.
    """
    m = len(ids)
    if descriptors.shape[0] != m or len(geotags) != m:
        raise ValueError("ids, descriptors, and geotags must align")
    order = sorted(range(m), key=lambda i: ids[i])
    id_rank = np.empty(m, dtype=np.int64)
    for rank, i in enumerate(order):
        id_rank[i] = rank
    geo = np.array(
        [[geotags[i].distance_to(geotags[j]) for j in range(m)] for i in range(m)]
    )
    tuples: list[TrainingTuple] = []
    skipped = 0
    for q in order:
        desc_dist = np.linalg.norm(descriptors - descriptors[q], axis=1)
        pos_mask = (geo[q] <= config.positive_radius) & (np.arange(m) != q)
        if not pos_mask.any():
            skipped += 1
            continue
        pos_idx = np.nonzero(pos_mask)[0]
        best = pos_idx[np.lexsort((id_rank[pos_idx], desc_dist[pos_idx]))[0]]
        neg_idx = np.nonzero(geo[q] > config.negative_radius)[0]
        neg_order = neg_idx[np.lexsort((id_rank[neg_idx], desc_dist[neg_idx]))]
        chosen = neg_order[: config.n_neg]
        if chosen.size == 0:
            skipped += 1
            continue
        tuples.append(
            TrainingTuple(
                query_id=ids[q],
                positive_id=ids[best],
                negative_ids=tuple(ids[i] for i in chosen),
            )
        )
    return tuples, skipped


# ---------------------------------------------------------------------------
# SGD training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    val_recall1: float
    learning_rate: float


@dataclass
class TrainResult:
    model: ClusterModel
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_recall1: float = 0.0
    skipped_queries: int = 0
    optimizer_state: Gradients | None = None  # final momentum buffers


def split_views_for_eval(
    sets: list[LocalFeatureSet], tags: list[GeoTag]
) -> tuple[list[int], list[int]]:
    """Split a view list into database and query indices per place.

    Views are grouped by geotag proximity; within each place the
    lexicographically last half of the views become queries and the rest
    go to the database.  Single-view places stay database-only.
    """
    groups = group_places(tags)
    by_group: dict[int, list[int]] = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    db, queries = [], []
    for members in by_group.values():
        members = sorted(members, key=lambda i: sets[i].image_id)
        n_query = len(members) // 2
        db.extend(members[: len(members) - n_query])
        queries.extend(members[len(members) - n_query :])
    return sorted(db), sorted(queries)


def _validation_recall1(
    sets: list[LocalFeatureSet],
    tags: list[GeoTag],
    db_idx: list[int],
    query_idx: list[int],
    model: ClusterModel,
    d_r: float = 25.0,
) -> float:
    db_vectors = encode_batch([sets[i] for i in db_idx], model)
    index = build_index([sets[i].image_id for i in db_idx], db_vectors, [tags[i] for i in db_idx])
    query_vectors = encode_batch([sets[i] for i in query_idx], model)
    result = recall_at(index, query_vectors, [tags[i] for i in query_idx], [1], d_r=d_r)
    return result.recalls[1]


def train(
    train_sets: list[LocalFeatureSet],
    train_tags: list[GeoTag],
    val_sets: list[LocalFeatureSet],
    val_tags: list[GeoTag],
    model: ClusterModel,
    config: SgdConfig,
) -> TrainResult:
    """SGD with momentum and weight decay over mined tuples.

    Descriptors for mining are recomputed once per epoch.  The learning
    rate halves every ``lr_halving_period`` epochs; training stops early
    when the best validation recall@1 has not improved for
    ``early_stop_patience`` epochs.  The returned model carries the
    parameters of the best validation epoch (the initial model counts as
    epoch 0).  Deterministic given the config seed.
    """
    train_sets = [normalize_features(fs) for fs in train_sets]
    val_sets = [normalize_features(fs) for fs in val_sets]
    order = sorted(range(len(train_sets)), key=lambda i: train_sets[i].image_id)
    train_sets = [train_sets[i] for i in order]
    train_tags = [train_tags[i] for i in order]
    ids = [fs.image_id for fs in train_sets]
    by_id = {fs.image_id: fs for fs in train_sets}

    weights = np.array(model.affine_weights)
    biases = np.array(model.affine_biases)
    residuals = np.array(model.residual_centroids)
    momentum = [np.zeros_like(weights), np.zeros_like(biases), np.zeros_like(residuals)]

    db_idx, query_idx = split_views_for_eval(val_sets, val_tags)
    if not query_idx:
        raise ValueError("validation split has no multi-view place to query")

    best_recall = _validation_recall1(val_sets, val_tags, db_idx, query_idx, model)
    best_params = (weights.copy(), biases.copy(), residuals.copy())
    best_epoch = 0
    history = [EpochStats(0, float("nan"), best_recall, config.learning_rate)]
    total_skipped = 0

    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate * 0.5 ** ((epoch - 1) // config.lr_halving_period)
        current = model.with_parameters(weights, biases, residuals)
        cache = encode_batch(train_sets, current)
        tuples, skipped = mine_tuples(ids, cache, train_tags, config)
        total_skipped += skipped
        if not tuples:
            raise NoPositive("no query produced a training tuple")

        losses = []
        for tup in tuples:
            current = model.with_parameters(weights, biases, residuals)
            loss, grads = tuple_forward_backward(
                by_id[tup.query_id],
                by_id[tup.positive_id],
                [by_id[n] for n in tup.negative_ids],
                current,
                config.margin,
            )
            losses.append(loss)
            for param, buf, grad in zip((weights, biases, residuals), momentum, grads):
                step = grad + config.weight_decay * param
                buf *= config.momentum
                buf += step
                param -= lr * buf

        current = model.with_parameters(weights, biases, residuals)
        recall = _validation_recall1(val_sets, val_tags, db_idx, query_idx, current)
        history.append(EpochStats(epoch, float(np.mean(losses)), recall, lr))
        if recall > best_recall:
            best_recall = recall
            best_params = (weights.copy(), biases.copy(), residuals.copy())
            best_epoch = epoch
        if epoch - best_epoch >= config.early_stop_patience:
            break

    return TrainResult(
        model=model.with_parameters(*best_params),
        history=history,
        best_epoch=best_epoch,
        best_val_recall1=best_recall,
        skipped_queries=total_skipped,
        optimizer_state=Gradients(*momentum),
    )


SRLO_MAGIC = b"SRLO"
SRLO_VERSION = 1


def save_optimizer_state(path, state: Gradients) -> None:
    """Momentum buffers for the three parameter tensors, float64."""
    import struct

    k, channels, d = state.weights.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", SRLO_MAGIC, SRLO_VERSION, k, channels - 1, d))
        for arr in state:
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_optimizer_state(path) -> Gradients:
    import struct

    from .errors import DimensionMismatch, FormatError

    with open(path, "rb") as fh:
        data = fh.read()
    header = struct.Struct("<4sIIII")
    if len(data) < header.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, k, s, d = header.unpack_from(data, 0)
    if magic != SRLO_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != SRLO_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    shapes = [(k, s + 1, d), (k, s + 1), (k, d)]
    expected = header.size + sum(int(np.prod(sh)) * 8 for sh in shapes)
    if len(data) != expected:
        raise DimensionMismatch(f"header promises {expected} bytes but file has {len(data)}")
    offset = header.size
    arrays = []
    for sh in shapes:
        count = int(np.prod(sh))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(sh))
        offset += count * 8
    return Gradients(*arrays)


def write_history_csv(path, history: list[EpochStats]) -> None:
    """Line-delimited training records: epoch, mean loss, val recall@1, lr."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_recall@1", "lr"])
        for row in history:
            writer.writerow(
                [row.epoch, repr(float(row.mean_loss)), repr(float(row.val_recall1)), repr(float(row.learning_rate))]
            )
