"""Exact retrieval benchmark: brute-force nearest neighbors and Recall@N.

Databases at desk scale are small enough that exact search is both cheap
and required — the acceptance oracles compare against full sorts, so any
approximation would be indistinguishable from a bug.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, DuplicateId, EmptyIndex, FormatError
from .features import PLANAR, SPHERICAL, GeoTag

SRLI_MAGIC = b"SRLI"
SRLI_VERSION = 1


@dataclass(frozen=True)
class DescriptorIndex:
    """Immutable descriptor database with ids and geotags."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # (M, dim)
    geotags: tuple[GeoTag, ...]

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, order="C")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "geotags", tuple(self.geotags))
        # Rank of each entry in lexicographic id order, for distance ties.
        rank = np.empty(len(self.ids), dtype=np.int64)
        for r, i in enumerate(sorted(range(len(self.ids)), key=lambda i: self.ids[i])):
            rank[i] = r
        rank.setflags(write=False)
        object.__setattr__(self, "_id_rank", rank)

    def __len__(self) -> int:
        return len(self.ids)


def build_index(ids: list[str], vectors: np.ndarray, geotags: list[GeoTag]) -> DescriptorIndex:
    """Build an exact-search index; ids must be unique and aligned."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids) or len(geotags) != len(ids):
        raise DimensionMismatch(
            f"{len(ids)} ids vs vectors {vectors.shape} vs {len(geotags)} geotags"
        )
    seen = set()
    for image_id in ids:
        if image_id in seen:
            raise DuplicateId(f"duplicate image id {image_id!r}")
        seen.add(image_id)
    return DescriptorIndex(ids=tuple(ids), vectors=vectors, geotags=tuple(geotags))


def query_topn(index: DescriptorIndex, query: np.ndarray, n: int) -> list[tuple[str, float]]:
    """Exact top-N neighbors by Euclidean distance, ties broken by id."""
    if len(index) == 0:
        raise EmptyIndex("cannot query an empty index")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.vectors.shape[1],):
        raise DimensionMismatch(
            f"query shape {query.shape} != descriptor dim {index.vectors.shape[1]}"
        )
    dists = np.linalg.norm(index.vectors - query, axis=1)
    order = np.lexsort((index._id_rank, dists))[: max(0, n)]
    return [(index.ids[i], float(dists[i])) for i in order]


@dataclass(frozen=True)
class RecallResult:
    n_values: tuple[int, ...]
    recalls: dict[int, float]
    num_queries: int
    num_unreachable: int  # queries with no database item inside d_r at all


def recall_at(
    index: DescriptorIndex,
    query_vectors: np.ndarray,
    query_tags: list[GeoTag],
    n_values: list[int],
    d_r: float = 25.0,
) -> RecallResult:
    """Recall@N under the geographic success criterion.

    A query succeeds at N when any of its top-N candidates lies within
    ``d_r`` meters of the query geotag.  Queries with no in-range
    database item count as failures and are tallied separately.
    """
    query_vectors = np.asarray(query_vectors, dtype=np.float64)
    if query_vectors.ndim != 2 or query_vectors.shape[0] != len(query_tags):
        raise DimensionMismatch(
            f"query vectors {query_vectors.shape} vs {len(query_tags)} geotags"
        )
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values or n_values[0] < 1:
        raise ValueError("n_values must be positive")
    successes = {n: 0 for n in n_values}
    unreachable = 0
    max_n = n_values[-1]
    for vec, tag in zip(query_vectors, query_tags):
        geo_ok = [t.distance_to(tag) <= d_r for t in index.geotags]
        if not any(geo_ok):
            unreachable += 1
            continue
        in_range = {
            index.ids[i] for i, ok in enumerate(geo_ok) if ok
        }
        ranked = query_topn(index, vec, max_n)
        hit_rank = next(
            (r for r, (image_id, _) in enumerate(ranked) if image_id in in_range), None
        )
        if hit_rank is None:
            continue
        for n in n_values:
            if hit_rank < n:
                successes[n] += 1
    num_queries = len(query_tags)
    recalls = {
        n: (successes[n] / num_queries if num_queries else 0.0) for n in n_values
    }
    return RecallResult(
        n_values=tuple(n_values),
        recalls=recalls,
        num_queries=num_queries,
        num_unreachable=unreachable,
    )


def write_recall_csv(path, result: RecallResult) -> None:
    """Emit `N,recall` rows in ascending N."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "recall"])
        for n in result.n_values:
            writer.writerow([n, repr(float(result.recalls[n]))])


def write_recall_gnuplot(path, result: RecallResult) -> None:
    """Whitespace-separated recall curve data for gnuplot."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# N recall\n")
        for n in result.n_values:
            fh.write(f"{n} {float(result.recalls[n])!r}\n")


# ---------------------------------------------------------------------------
# Index serialization
# ---------------------------------------------------------------------------

_SRLI_HEADER = struct.Struct("<4sIIIB")


def save_index(index: DescriptorIndex, path) -> None:
    frames = {t.frame for t in index.geotags}
    if len(frames) > 1:
        raise ValueError("index cannot mix geotag frames")
    frame = frames.pop() if frames else PLANAR
    with open(path, "wb") as fh:
        fh.write(
            _SRLI_HEADER.pack(
                SRLI_MAGIC,
                SRLI_VERSION,
                len(index),
                index.vectors.shape[1] if len(index) else 0,
                0 if frame == PLANAR else 1,
            )
        )
        for image_id, tag, row in zip(index.ids, index.geotags, index.vectors):
            id_bytes = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<dd", tag.x, tag.y))
            fh.write(np.asarray(row, dtype="<f8").tobytes())


def load_index(path) -> DescriptorIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SRLI_HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, count, dim, frame_code = _SRLI_HEADER.unpack_from(data, 0)
    if magic != SRLI_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != SRLI_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    frame = PLANAR if frame_code == 0 else SPHERICAL
    offset = _SRLI_HEADER.size
    ids, tags = [], []
    vectors = np.empty((count, dim))
    for i in range(count):
        if len(data) < offset + 2:
            raise DimensionMismatch(f"file ends inside record {i}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        record = id_len + 16 + dim * 8
        if len(data) < offset + record:
            raise DimensionMismatch(f"file ends inside record {i}")
        ids.append(data[offset : offset + id_len].decode("utf-8"))
        offset += id_len
        x, y = struct.unpack_from("<dd", data, offset)
        offset += 16
        tags.append(GeoTag(x, y, frame=frame))
        vectors[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=offset)
        offset += dim * 8
    if offset != len(data):
        raise DimensionMismatch(f"{len(data) - offset} trailing bytes after last record")
    return build_index(ids, vectors, tags)
