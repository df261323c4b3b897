"""PCA whitening and dimensionality reduction of descriptors.

Whitening decorrelates descriptor components and equalizes their
variances, penalizing co-occurrence over-counting before truncation to a
compact dimensionality.  The transform is fit on training descriptors
only; applying it projects, then re-L2-normalizes.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .encoding import WHITENED, Descriptor
from .errors import DegenerateDescriptor, DimensionMismatch, FormatError, RankDeficientWarning

SRLW_MAGIC = b"SRLW"
SRLW_VERSION = 1

EIGENVALUE_FLOOR = 1e-9


@dataclass(frozen=True)
class WhiteningTransform:
    """Mean vector plus whitening projection onto the top principal axes."""

    mean: np.ndarray  # (input_dim,)
    projection: np.ndarray  # (target_dim, input_dim), rows scaled by 1/sqrt(eig+eps)
    eigenvalue_floor: float = EIGENVALUE_FLOOR

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64, order="C")
        projection = np.array(self.projection, dtype=np.float64, order="C")
        if projection.ndim != 2 or mean.ndim != 1 or projection.shape[1] != mean.shape[0]:
            raise DimensionMismatch(
                f"projection {projection.shape} does not match mean {mean.shape}"
            )
        if projection.shape[0] > projection.shape[1]:
            raise DimensionMismatch("target dimension exceeds input dimension")
        mean.setflags(write=False)
        projection.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "projection", projection)

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def target_dim(self) -> int:
        return self.projection.shape[0]


def fit_whitening(descriptors: np.ndarray, target_dim: int) -> WhiteningTransform:
    """Fit PCA whitening on training descriptors.

    Eigenpairs of the sample covariance are kept in descending eigenvalue
    order (ties by index) and scaled by 1/sqrt(eig + eps).  When fewer
    than ``target_dim`` eigenvalues exceed the floor the fit still
    returns ``target_dim`` rows but warns: the trailing directions carry
    no variance and are clamped by the floor.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2:
        raise DimensionMismatch(f"descriptor matrix must be 2-D, got {descriptors.shape}")
    m, dim = descriptors.shape
    if not 1 <= target_dim <= dim:
        raise ValueError(f"target_dim must be in [1, {dim}], got {target_dim}")
    if m < 2:
        raise ValueError("need at least two descriptors to estimate covariance")
    mean = descriptors.mean(axis=0)
    centered = descriptors - mean
    cov = centered.T @ centered / (m - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")[:target_dim]
    kept = np.clip(eigvals[order], 0.0, None)
    if int(np.sum(eigvals > EIGENVALUE_FLOOR)) < target_dim:
        warnings.warn(
            f"covariance has fewer than {target_dim} eigenvalues above "
            f"{EIGENVALUE_FLOOR:g}; trailing directions are variance-free",
            RankDeficientWarning,
            stacklevel=2,
        )
    scales = 1.0 / np.sqrt(kept + EIGENVALUE_FLOOR)
    projection = scales[:, None] * eigvecs[:, order].T
    return WhiteningTransform(mean=mean, projection=projection)


def transform(t: WhiteningTransform, descriptors: np.ndarray) -> np.ndarray:
    """Project centered descriptors without renormalization, (M, target_dim)."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.shape[-1] != t.input_dim:
        raise DimensionMismatch(
            f"descriptor dim {descriptors.shape[-1]} != transform input {t.input_dim}"
        )
    return (descriptors - t.mean) @ t.projection.T


def apply_whitening(t: WhiteningTransform, desc: Descriptor) -> Descriptor:
    """Project one descriptor and re-L2-normalize to unit length."""
    projected = transform(t, desc.values[None, :])[0]
    norm = np.linalg.norm(projected)
    if norm == 0.0:
        raise DegenerateDescriptor("descriptor projects onto the zero vector")
    return Descriptor(projected / norm, state=WHITENED, block_size=None)


def apply_whitening_batch(t: WhiteningTransform, vectors: np.ndarray) -> np.ndarray:
    """Whiten and renormalize a batch of descriptor rows."""
    projected = transform(t, vectors)
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateDescriptor("a descriptor projects onto the zero vector")
    return projected / norms[:, None]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_SRLW_HEADER = struct.Struct("<4sIIId")


def save_whitening(t: WhiteningTransform, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _SRLW_HEADER.pack(
                SRLW_MAGIC, SRLW_VERSION, t.input_dim, t.target_dim, t.eigenvalue_floor
            )
        )
        fh.write(np.asarray(t.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(t.projection, dtype="<f8").tobytes())


def load_whitening(path) -> WhiteningTransform:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SRLW_HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, input_dim, target_dim, floor = _SRLW_HEADER.unpack_from(data, 0)
    if magic != SRLW_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != SRLW_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    expected = _SRLW_HEADER.size + (input_dim + target_dim * input_dim) * 8
    if len(data) != expected:
        raise DimensionMismatch(f"header promises {expected} bytes but file has {len(data)}")
    offset = _SRLW_HEADER.size
    mean = np.frombuffer(data, dtype="<f8", count=input_dim, offset=offset)
    offset += input_dim * 8
    projection = np.frombuffer(
        data, dtype="<f8", count=target_dim * input_dim, offset=offset
    ).reshape(target_dim, input_dim)
    return WhiteningTransform(mean=mean, projection=projection, eigenvalue_floor=floor)
