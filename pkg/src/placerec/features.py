"""Local-feature containers, file formats, geotags, and the synthetic dataset.

A :class:`LocalFeatureSet` holds one image's grid of D-dimensional local
features (rows of an ``(H*W, D)`` matrix), optionally with one semantic
class id per feature.  Features travel on disk in the little-endian SRLF
binary format and geotags in a small CSV manifest.  The synthetic
generator plants well-separated "places" whose views share informative
feature prototypes while clutter is drawn from a pool shared across all
places, giving a desk-scale dataset with the same failure mode that
attention weighting is meant to fix.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, FormatError, InvalidSpec, ZeroFeature

PLANAR = "planar"
SPHERICAL = "spherical"

_EARTH_RADIUS_M = 6371000.0

# Norm slack accepted at construction.  Normalization itself is exact to
# ~1e-15, but float32 file storage rounds unit rows by up to ~1e-6.
_NORM_CONSTRUCTION_TOL = 1e-6

SRLF_MAGIC = b"SRLF"
SRLF_VERSION = 1

# Class ids used by the synthetic generator.  Informative features carry
# static ids, clutter features dynamic ids.
SYNTHETIC_STATIC_CLASSES = (0, 1, 2, 3)
SYNTHETIC_DYNAMIC_CLASSES = (4, 5, 6)

# Number of shared clutter prototypes the generator draws once for the
# whole dataset; every clutter feature is a noisy copy of one of them.
_CLUTTER_MODES = 4


@dataclass(frozen=True)
class SemanticPartition:
    """Disjoint sets of class ids treated as static scenery vs dynamic clutter."""

    static_classes: frozenset[int]
    dynamic_classes: frozenset[int]

    def __post_init__(self):
        static = frozenset(int(c) for c in self.static_classes)
        dynamic = frozenset(int(c) for c in self.dynamic_classes)
        if static & dynamic:
            raise ValueError(f"static and dynamic classes overlap: {sorted(static & dynamic)}")
        object.__setattr__(self, "static_classes", static)
        object.__setattr__(self, "dynamic_classes", dynamic)


DEFAULT_PARTITION = SemanticPartition(
    static_classes=frozenset(SYNTHETIC_STATIC_CLASSES),
    dynamic_classes=frozenset(SYNTHETIC_DYNAMIC_CLASSES),
)


@dataclass(frozen=True)
class GeoTag:
    """Position on a local planar frame (meters) or as (lat, lon) degrees."""

    x: float
    y: float
    frame: str = PLANAR

    def __post_init__(self):
        if self.frame not in (PLANAR, SPHERICAL):
            raise ValueError(f"unknown frame {self.frame!r}")

    def distance_to(self, other: "GeoTag") -> float:
        """Metric distance in meters; haversine on the spherical frame."""
        if self.frame != other.frame:
            raise ValueError(f"frame mismatch: {self.frame} vs {other.frame}")
        if self.frame == PLANAR:
            return math.hypot(self.x - other.x, self.y - other.y)
        lat1, lon1, lat2, lon2 = map(math.radians, (self.x, self.y, other.x, other.y))
        s = (
            math.sin((lat2 - lat1) / 2) ** 2
            + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
        )
        return 2.0 * _EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


@dataclass(frozen=True)
class LocalFeatureSet:
    """One image's grid of local features, flattened row-major to (H*W, D)."""

    image_id: str
    features: np.ndarray
    height: int
    width: int
    depth: int
    labels: np.ndarray | None = None
    is_normalized: bool = False

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.height * self.width < 1:
            raise ValueError("H*W must be at least 1")
        if self.depth < 2:
            raise ValueError("feature depth must be at least 2")
        feats = np.array(self.features, dtype=np.float64, order="C")
        if feats.shape != (self.height * self.width, self.depth):
            raise DimensionMismatch(
                f"features shape {feats.shape} does not match "
                f"(H*W={self.height * self.width}, D={self.depth})"
            )
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.uint16, order="C")
            if labels.shape != (self.height * self.width,):
                raise DimensionMismatch(
                    f"labels shape {labels.shape} does not match H*W={self.height * self.width}"
                )
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        if self.is_normalized:
            norms = np.linalg.norm(feats, axis=1)
            if np.any(np.abs(norms - 1.0) > _NORM_CONSTRUCTION_TOL):
                raise ValueError("is_normalized is set but some row norms deviate from 1")

    @property
    def num_features(self) -> int:
        return self.height * self.width


def normalize_features(fs: LocalFeatureSet) -> LocalFeatureSet:
    """Return a copy with every feature row scaled to unit L2 norm.

    Idempotent on already-normalized input.  Raises :class:`ZeroFeature`
    if any row norm falls below 1e-12, since silently skipping a row
    would desynchronize features from their labels.
    """
    if fs.is_normalized:
        return fs
    norms = np.linalg.norm(fs.features, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise ZeroFeature(f"feature row {bad} of {fs.image_id!r} has norm {norms[bad]:.3e}")
    return replace(fs, features=fs.features / norms[:, None], is_normalized=True)


@dataclass(frozen=True)
class SyntheticPlaceSpec:
    """Parameters of the planted-place synthetic dataset."""

    num_places: int
    views_per_place: int
    depth: int
    height: int
    width: int
    informative_fraction: float
    clutter_noise_scale: float = 0.1
    view_noise_scale: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_places < 1 or self.views_per_place < 1:
            raise InvalidSpec("num_places and views_per_place must be positive")
        if self.depth < 2 or self.height < 1 or self.width < 1:
            raise InvalidSpec("feature dimensions must be positive (depth >= 2)")
        if not 0.0 < self.informative_fraction < 1.0:
            raise InvalidSpec("informative_fraction must lie strictly inside (0, 1)")
        if self.clutter_noise_scale < 0 or self.view_noise_scale < 0:
            raise InvalidSpec("noise scales must be nonnegative")


# Places are laid out on a planar grid with this spacing; it exceeds twice
# the 25 m retrieval radius so distinct places are definite negatives.
_PLACE_SPACING_M = 60.0
_RETRIEVAL_RADIUS_M = 25.0


def generate_synthetic_dataset(
    spec: SyntheticPlaceSpec,
) -> tuple[list[LocalFeatureSet], list[GeoTag]]:
    """Generate labeled feature sets and geotags for the planted places.

    Deterministic given ``spec.rng_seed``.  Each place owns a set of
    informative prototypes shared by all of its views (plus per-view
    noise, static labels); the remaining grid slots are clutter drawn
    from prototypes shared across every place (dynamic labels).  Place
    centers sit on a grid with >2*25 m spacing and each view's geotag
    stays within 2.5 m of its place center.
    """
    rng = np.random.default_rng(spec.rng_seed)
    grid = spec.height * spec.width
    n_informative = int(round(spec.informative_fraction * grid))

    side = math.ceil(math.sqrt(spec.num_places))
    centers = [
        ((p % side) * _PLACE_SPACING_M, (p // side) * _PLACE_SPACING_M)
        for p in range(spec.num_places)
    ]

    place_protos = rng.normal(size=(spec.num_places, n_informative, spec.depth))
    place_protos /= np.linalg.norm(place_protos, axis=2, keepdims=True)
    clutter_protos = rng.normal(size=(_CLUTTER_MODES, spec.depth))
    clutter_protos /= np.linalg.norm(clutter_protos, axis=1, keepdims=True)

    static_ids = np.array(SYNTHETIC_STATIC_CLASSES, dtype=np.uint16)
    dynamic_ids = np.array(SYNTHETIC_DYNAMIC_CLASSES, dtype=np.uint16)

    sets: list[LocalFeatureSet] = []
    tags: list[GeoTag] = []
    for p in range(spec.num_places):
        cx, cy = centers[p]
        for v in range(spec.views_per_place):
            radius = (_RETRIEVAL_RADIUS_M / 10.0) * rng.uniform()
            angle = rng.uniform(0.0, 2.0 * math.pi)
            tag = GeoTag(cx + radius * math.cos(angle), cy + radius * math.sin(angle))

            feats = np.empty((grid, spec.depth))
            labels = np.empty(grid, dtype=np.uint16)
            feats[:n_informative] = place_protos[p] + spec.view_noise_scale * rng.normal(
                size=(n_informative, spec.depth)
            )
            labels[:n_informative] = static_ids[np.arange(n_informative) % len(static_ids)]
            n_clutter = grid - n_informative
            modes = rng.integers(0, _CLUTTER_MODES, size=n_clutter)
            feats[n_informative:] = clutter_protos[modes] + spec.clutter_noise_scale * rng.normal(
                size=(n_clutter, spec.depth)
            )
            labels[n_informative:] = dynamic_ids[np.arange(n_clutter) % len(dynamic_ids)]

            sets.append(
                LocalFeatureSet(
                    image_id=f"place{p:03d}_view{v:02d}",
                    features=feats,
                    height=spec.height,
                    width=spec.width,
                    depth=spec.depth,
                    labels=labels,
                )
            )
            tags.append(tag)
    return sets, tags


# ---------------------------------------------------------------------------
# SRLF binary feature files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIBBH")


def write_feature_file(fs: LocalFeatureSet, path) -> None:
    """Write one feature set in the SRLF format (features stored as float32)."""
    id_bytes = fs.image_id.encode("utf-8")
    if len(id_bytes) > 0xFFFF:
        raise ValueError("image_id longer than 65535 UTF-8 bytes")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                SRLF_MAGIC,
                SRLF_VERSION,
                fs.height,
                fs.width,
                fs.depth,
                1 if fs.labels is not None else 0,
                1 if fs.is_normalized else 0,
                len(id_bytes),
            )
        )
        fh.write(id_bytes)
        fh.write(np.asarray(fs.features, dtype="<f4").tobytes())
        if fs.labels is not None:
            fh.write(np.asarray(fs.labels, dtype="<u2").tobytes())


def read_feature_file(path) -> LocalFeatureSet:
    """Read an SRLF file, validating magic, version, and payload sizes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, height, width, depth, has_labels, is_norm, id_len = _HEADER.unpack_from(
        data, 0
    )
    if magic != SRLF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != SRLF_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if height < 1 or width < 1 or depth < 2:
        raise FormatError(f"invalid dimensions H={height} W={width} D={depth}", offset=8)
    if has_labels not in (0, 1) or is_norm not in (0, 1):
        raise FormatError("flag bytes must be 0 or 1", offset=20)
    offset = _HEADER.size
    if len(data) < offset + id_len:
        raise FormatError("truncated image_id", offset=len(data))
    try:
        image_id = data[offset : offset + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"image_id is not valid UTF-8: {exc}", offset=offset) from exc
    offset += id_len

    grid = height * width
    feat_bytes = grid * depth * 4
    label_bytes = grid * 2 if has_labels else 0
    expected = offset + feat_bytes + label_bytes
    if len(data) != expected:
        raise DimensionMismatch(
            f"header promises {expected} bytes ({grid}x{depth} float32"
            f"{' + labels' if has_labels else ''}) but file has {len(data)}"
        )
    feats = np.frombuffer(data, dtype="<f4", count=grid * depth, offset=offset)
    feats = feats.reshape(grid, depth).astype(np.float64)
    offset += feat_bytes
    labels = None
    if has_labels:
        labels = np.frombuffer(data, dtype="<u2", count=grid, offset=offset).copy()
    return LocalFeatureSet(
        image_id=image_id,
        features=feats,
        height=height,
        width=width,
        depth=depth,
        labels=labels,
        is_normalized=bool(is_norm),
    )


# ---------------------------------------------------------------------------
# Geotag manifests
# ---------------------------------------------------------------------------

_PLANAR_HEADER = ["image_id", "x_m", "y_m"]
_SPHERICAL_HEADER = ["image_id", "lat", "lon"]


def write_geotag_manifest(path, ids: list[str], tags: list[GeoTag]) -> None:
    """Write `image_id,x_m,y_m` (planar) or `image_id,lat,lon` (spherical) CSV."""
    if len(ids) != len(tags):
        raise DimensionMismatch(f"{len(ids)} ids vs {len(tags)} geotags")
    frames = {t.frame for t in tags}
    if len(frames) > 1:
        raise ValueError("manifest cannot mix planar and spherical geotags")
    frame = frames.pop() if frames else PLANAR
    header = _PLANAR_HEADER if frame == PLANAR else _SPHERICAL_HEADER
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for image_id, tag in zip(ids, tags):
            writer.writerow([image_id, repr(float(tag.x)), repr(float(tag.y))])


def read_geotag_manifest(path) -> dict[str, GeoTag]:
    """Read a geotag manifest; the header row declares the distance frame."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty manifest") from None
        header = [h.strip() for h in header]
        if header == _PLANAR_HEADER:
            frame = PLANAR
        elif header == _SPHERICAL_HEADER:
            frame = SPHERICAL
        else:
            raise FormatError(f"unrecognized manifest header {header}")
        tags: dict[str, GeoTag] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"line {line_no}: expected 3 columns, got {len(row)}")
            image_id = row[0]
            if image_id in tags:
                raise FormatError(f"line {line_no}: duplicate image_id {image_id!r}")
            try:
                tags[image_id] = GeoTag(float(row[1]), float(row[2]), frame=frame)
            except ValueError as exc:
                raise FormatError(f"line {line_no}: {exc}") from exc
    return tags


def group_places(tags: list[GeoTag], radius: float = 2.0 * _RETRIEVAL_RADIUS_M / 10.0) -> list[int]:
    """Group geotags into places by transitive proximity within ``radius``.

    Returns one group index per tag.  Views of a synthetic place lie
    within 2.5 m of its center, so the 5 m default separates them cleanly
    from the 60 m place grid.
    """
    n = len(tags)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if tags[i].distance_to(tags[j]) <= radius:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots: dict[int, int] = {}
    groups = []
    for i in range(n):
        r = find(i)
        if r not in roots:
            roots[r] = len(roots)
        groups.append(roots[r])
    return groups
