"""Hierarchical attention-weighted VLAD encoding.

A :class:`ClusterModel` partitions feature space into K visual words.
Each word has one representative centroid and S shadow centroids marking
ambiguous sub-regions; a feature's inter-cluster soft assignment (alpha)
and intra-cluster saliency (beta) are both softmaxes of the same affine
responses ``w.x + b``, where ``w = 2a*c`` and ``b = -a*|c|^2`` reproduce
the Gaussian-kernel distance weights exactly for unit-norm features.
The image descriptor is the concatenation of per-word sums of
double-weighted residuals, intra-normalized and then L2-normalized.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateDescriptor, DimensionMismatch, FormatError
from .features import LocalFeatureSet, normalize_features

RAW = "raw"
INTRA_NORMALIZED = "intra_normalized"
FULLY_NORMALIZED = "fully_normalized"
WHITENED = "whitened"

SRLM_MAGIC = b"SRLM"
SRLM_VERSION = 1

# Default decay scale: near-hard assignment for unit-norm features while
# exponent magnitudes (<= 4a) stay far from float overflow.
DEFAULT_SCALE = 30.0


def _owned(values) -> np.ndarray:
    """Copy into a frozen float64 array so callers keep their own writable one."""
    arr = np.array(values, dtype=np.float64, order="C")
    arr.setflags(write=False)
    return arr


def centroids_to_affine(centroids: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Convert centroids to the affine response form.

    For unit-norm x, exp(-a*|x - c|^2) is proportional to exp(w.x + b)
    with ``w = 2a*c`` and ``b = -a*|c|^2``; the x-dependent factor cancels
    inside each softmax.  Works on any trailing-dimension-D stack.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    centroids = np.asarray(centroids, dtype=np.float64)
    weights = 2.0 * scale * centroids
    biases = -scale * np.sum(centroids * centroids, axis=-1)
    return weights, biases


@dataclass(frozen=True)
class ClusterModel:
    """Trainable visual-word model.

    The affine weights/biases and the residual centroids are the trained
    parameters; the raw centroids are kept as the initialization record.
    Index 0 of the shadow axis is the representative channel.
    """

    scale: float
    representative_centroids: np.ndarray  # (K, D)
    shadow_centroids: np.ndarray  # (K, S, D)
    affine_weights: np.ndarray  # (K, S+1, D)
    affine_biases: np.ndarray  # (K, S+1)
    residual_centroids: np.ndarray  # (K, D)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        arrays = {}
        for name in (
            "representative_centroids",
            "shadow_centroids",
            "affine_weights",
            "affine_biases",
            "residual_centroids",
        ):
            arr = _owned(getattr(self, name))
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        k, d = arrays["representative_centroids"].shape
        if k < 1:
            raise ValueError("need at least one cluster")
        s = arrays["shadow_centroids"].shape[1] if arrays["shadow_centroids"].ndim == 3 else -1
        if arrays["shadow_centroids"].shape != (k, s, d) or s < 0:
            raise DimensionMismatch(
                f"shadow centroids shape {arrays['shadow_centroids'].shape} "
                f"does not match (K={k}, S, D={d})"
            )
        if arrays["affine_weights"].shape != (k, s + 1, d):
            raise DimensionMismatch(
                f"affine weights shape {arrays['affine_weights'].shape} != {(k, s + 1, d)}"
            )
        if arrays["affine_biases"].shape != (k, s + 1):
            raise DimensionMismatch(
                f"affine biases shape {arrays['affine_biases'].shape} != {(k, s + 1)}"
            )
        if arrays["residual_centroids"].shape != (k, d):
            raise DimensionMismatch(
                f"residual centroids shape {arrays['residual_centroids'].shape} != {(k, d)}"
            )

    @property
    def num_clusters(self) -> int:
        return self.representative_centroids.shape[0]

    @property
    def num_shadows(self) -> int:
        return self.shadow_centroids.shape[1]

    @property
    def depth(self) -> int:
        return self.representative_centroids.shape[1]

    @classmethod
    def from_centroids(
        cls,
        representative: np.ndarray,
        shadows: np.ndarray,
        scale: float = DEFAULT_SCALE,
    ) -> "ClusterModel":
        """Build a model whose affine form initially equals the distance form."""
        representative = np.asarray(representative, dtype=np.float64)
        shadows = np.asarray(shadows, dtype=np.float64)
        stacked = np.concatenate([representative[:, None, :], shadows], axis=1)
        weights, biases = centroids_to_affine(stacked, scale)
        return cls(
            scale=scale,
            representative_centroids=representative,
            shadow_centroids=shadows,
            affine_weights=weights,
            affine_biases=biases,
            residual_centroids=representative.copy(),
        )

    def with_parameters(
        self, weights: np.ndarray, biases: np.ndarray, residuals: np.ndarray
    ) -> "ClusterModel":
        """Return a copy carrying updated trainable parameters."""
        return replace(
            self,
            affine_weights=weights,
            affine_biases=biases,
            residual_centroids=residuals,
        )


@dataclass(frozen=True)
class AttentionMaps:
    """Per-feature soft assignment (alpha) and saliency (beta), both (H*W, K)."""

    alpha: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class Descriptor:
    """Image embedding vector with its normalization state.

    ``block_size`` records the per-word block length while the vector is
    still a concatenation of word blocks; whitening drops it.
    """

    values: np.ndarray
    state: str = RAW
    block_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _owned(self.values))


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    # Max subtraction is mandatory: exponents scale with the decay constant.
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_dims(fs: LocalFeatureSet, model: ClusterModel) -> None:
    if fs.depth != model.depth:
        raise DimensionMismatch(f"feature depth {fs.depth} != model depth {model.depth}")
    if not fs.is_normalized:
        raise ValueError("features must be normalized before encoding")


def _response_logits(features: np.ndarray, model: ClusterModel) -> np.ndarray:
    """Affine responses w.x + b for all clusters and channels, (H*W, K, S+1)."""
    logits = np.einsum("nd,ksd->nks", features, model.affine_weights)
    return logits + model.affine_biases[None, :, :]


def soft_assign(fs: LocalFeatureSet, model: ClusterModel) -> np.ndarray:
    """Soft assignment of each feature over the K clusters.

    Softmax across the representative channels; each row sums to 1.
    """
    _check_dims(fs, model)
    logits = _response_logits(fs.features, model)
    return _softmax(logits[:, :, 0], axis=1)


def intra_weight(fs: LocalFeatureSet, model: ClusterModel) -> np.ndarray:
    """Saliency of each feature inside each cluster's informative area.

    Per cluster, softmax over the representative and its S shadow
    channels; the representative component is the weight.  With S=0 the
    weight is identically 1.
    """
    _check_dims(fs, model)
    logits = _response_logits(fs.features, model)
    return _softmax(logits, axis=2)[:, :, 0]


def _weighted_residuals(
    features: np.ndarray, weights: np.ndarray, residual_centroids: np.ndarray
) -> np.ndarray:
    """Sum_i weights[i, k] * (x_i - c_k) for every cluster, (K, D)."""
    return weights.T @ features - weights.sum(axis=0)[:, None] * residual_centroids


def aggregate(fs: LocalFeatureSet, model: ClusterModel) -> tuple[Descriptor, AttentionMaps]:
    """Aggregate double-weighted residuals into a raw descriptor.

    Each word vector is the sum over features of alpha*beta-weighted
    residuals against the trained residual centroid; the descriptor is
    the concatenation of the K word vectors.
    """
    _check_dims(fs, model)
    logits = _response_logits(fs.features, model)
    alpha = _softmax(logits[:, :, 0], axis=1)
    beta = _softmax(logits, axis=2)[:, :, 0]
    vlad = _weighted_residuals(fs.features, alpha * beta, model.residual_centroids)
    desc = Descriptor(vlad.reshape(-1), state=RAW, block_size=model.depth)
    return desc, AttentionMaps(alpha=alpha, beta=beta)


def finalize(desc: Descriptor) -> Descriptor:
    """Intra-normalize each word block, then L2-normalize the whole vector.

    Zero blocks pass through unchanged (an empty word is normal); a fully
    zero descriptor raises :class:`DegenerateDescriptor`.
    """
    if desc.state != RAW:
        raise ValueError(f"finalize expects a raw descriptor, got {desc.state!r}")
    if desc.block_size is None or len(desc.values) % desc.block_size:
        raise DimensionMismatch("raw descriptor lost its block structure")
    blocks = desc.values.reshape(-1, desc.block_size)
    norms = np.linalg.norm(blocks, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    intra = blocks / safe[:, None]
    total = np.linalg.norm(intra)
    if total == 0.0:
        raise DegenerateDescriptor("descriptor is identically zero")
    return Descriptor(
        (intra / total).reshape(-1), state=FULLY_NORMALIZED, block_size=desc.block_size
    )


def encode(fs: LocalFeatureSet, model: ClusterModel) -> Descriptor:
    """Full encoding pipeline: normalize, weight, aggregate, finalize."""
    fs = normalize_features(fs)
    desc, _ = aggregate(fs, model)
    return finalize(desc)


def encode_with_attention(
    fs: LocalFeatureSet, model: ClusterModel
) -> tuple[Descriptor, AttentionMaps]:
    """Like :func:`encode` but also returns the attention maps."""
    fs = normalize_features(fs)
    desc, maps = aggregate(fs, model)
    return finalize(desc), maps


def encode_baseline(fs: LocalFeatureSet, model: ClusterModel) -> Descriptor:
    """Plain VLAD-style path without intra-cluster weighting.

    Only valid for S=0 models; kept as a dedicated path so the shadow
    machinery's S=0 reduction can be checked against it.
    """
    if model.num_shadows != 0:
        raise ValueError("baseline path requires a model without shadow centroids")
    fs = normalize_features(fs)
    alpha = soft_assign(fs, model)
    vlad = _weighted_residuals(fs.features, alpha, model.residual_centroids)
    return finalize(Descriptor(vlad.reshape(-1), state=RAW, block_size=model.depth))


def encode_batch(
    sets: list[LocalFeatureSet], model: ClusterModel, threads: int = 1
) -> np.ndarray:
    """Encode many images into a (M, K*D) matrix, optionally in parallel.

    Images are independent, so results are identical for any thread count.
    """
    out = np.empty((len(sets), model.num_clusters * model.depth))
    if threads <= 1 or len(sets) < 2:
        for i, fs in enumerate(sets):
            out[i] = encode(fs, model).values
        return out
    from concurrent.futures import ThreadPoolExecutor

    def run(i: int) -> None:
        out[i] = encode(sets[i], model).values

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, range(len(sets))))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_SRLM_HEADER = struct.Struct("<4sIIIId")


def save_model(model: ClusterModel, path) -> None:
    """Write the SRLM binary: header, then centroids, affine parameters,
    and residual centroids as little-endian float64 in declared order."""
    with open(path, "wb") as fh:
        fh.write(
            _SRLM_HEADER.pack(
                SRLM_MAGIC,
                SRLM_VERSION,
                model.num_clusters,
                model.num_shadows,
                model.depth,
                model.scale,
            )
        )
        for arr in (
            model.representative_centroids,
            model.shadow_centroids,
            model.affine_weights,
            model.affine_biases,
            model.residual_centroids,
        ):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_model(path) -> ClusterModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SRLM_HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, k, s, d, scale = _SRLM_HEADER.unpack_from(data, 0)
    if magic != SRLM_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != SRLM_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    shapes = [(k, d), (k, s, d), (k, s + 1, d), (k, s + 1), (k, d)]
    expected = _SRLM_HEADER.size + sum(int(np.prod(sh)) * 8 for sh in shapes)
    if len(data) != expected:
        raise DimensionMismatch(f"header promises {expected} bytes but file has {len(data)}")
    offset = _SRLM_HEADER.size
    arrays = []
    for sh in shapes:
        count = int(np.prod(sh))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(sh))
        offset += count * 8
    return ClusterModel(
        scale=scale,
        representative_centroids=arrays[0],
        shadow_centroids=arrays[1],
        affine_weights=arrays[2],
        affine_biases=arrays[3],
        residual_centroids=arrays[4],
    )


SRLD_MAGIC = b"SRLD"
SRLD_VERSION = 1
_SRLD_HEADER = struct.Struct("<4sIII")


def write_descriptor_file(path, ids: list[str], vectors: np.ndarray) -> None:
    """Write a batch of descriptors: header, then (id, float64 row) records."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise DimensionMismatch(f"{len(ids)} ids vs descriptor matrix {vectors.shape}")
    with open(path, "wb") as fh:
        fh.write(_SRLD_HEADER.pack(SRLD_MAGIC, SRLD_VERSION, len(ids), vectors.shape[1]))
        for image_id, row in zip(ids, vectors):
            id_bytes = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(np.asarray(row, dtype="<f8").tobytes())


def read_descriptor_file(path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SRLD_HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, count, dim = _SRLD_HEADER.unpack_from(data, 0)
    if magic != SRLD_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != SRLD_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    offset = _SRLD_HEADER.size
    ids: list[str] = []
    vectors = np.empty((count, dim))
    for i in range(count):
        if len(data) < offset + 2:
            raise DimensionMismatch(f"file ends inside record {i}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if len(data) < offset + id_len + dim * 8:
            raise DimensionMismatch(f"file ends inside record {i}")
        ids.append(data[offset : offset + id_len].decode("utf-8"))
        offset += id_len
        vectors[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=offset)
        offset += dim * 8
    if offset != len(data):
        raise DimensionMismatch(f"{len(data) - offset} trailing bytes after last record")
    return ids, vectors


def write_attention_csv(path, entries) -> None:
    """Export per-feature attention as `image_id,row,col,cluster,alpha,beta`.

    ``entries`` is an iterable of (feature set, attention maps) pairs.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "row", "col", "cluster", "alpha", "beta"])
        for fs, maps in entries:
            n, k = maps.alpha.shape
            if n != fs.num_features:
                raise DimensionMismatch(f"attention rows {n} != features {fs.num_features}")
            for i in range(n):
                r, c = divmod(i, fs.width)
                for j in range(k):
                    writer.writerow(
                        [fs.image_id, r, c, j, repr(float(maps.alpha[i, j])), repr(float(maps.beta[i, j]))]
                    )
