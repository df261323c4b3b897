"""Writers for the SRLF feature-file interface and its companion CSVs.

The consumer is a separate package; the byte layout below is the
contract: magic "SRLF", u32 version=1, u32 H, u32 W, u32 D, u8
has_labels, u8 is_normalized, u16 id length + UTF-8 id, H*W*D float32
features row-major, then H*W uint16 class ids when labels are present.
All integers little-endian.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

MAGIC = b"SRLF"
VERSION = 1

_HEADER = struct.Struct("<4sIIIIBBH")


def write_srlf(path, image_id: str, features: np.ndarray, labels: np.ndarray) -> None:
    """Write one image's (H, W, D) feature grid and (H, W) label grid."""
    if features.ndim != 3:
        raise ValueError(f"features must be (H, W, D), got {features.shape}")
    h, w, d = features.shape
    if labels.shape != (h, w):
        raise ValueError(f"labels {labels.shape} do not match grid ({h}, {w})")
    id_bytes = image_id.encode("utf-8")
    if len(id_bytes) > 0xFFFF:
        raise ValueError("image_id longer than 65535 UTF-8 bytes")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h, w, d, 1, 0, len(id_bytes)))
        fh.write(id_bytes)
        fh.write(np.asarray(features, dtype="<f4").reshape(h * w, d).tobytes())
        fh.write(np.asarray(labels, dtype="<u2").reshape(-1).tobytes())


def read_manifest(path) -> tuple[list[str], dict[str, tuple[str, str]]]:
    """Read a geotag manifest, returning its header and raw coordinate rows."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        header = [h.strip() for h in header]
        if header not in (["image_id", "x_m", "y_m"], ["image_id", "lat", "lon"]):
            raise ValueError(f"unrecognized manifest header {header}")
        rows = {}
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"manifest row has {len(row)} columns: {row}")
            rows[row[0]] = (row[1], row[2])
    return header, rows


def write_manifest(path, header: list[str], ids: list[str], rows: dict[str, tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for image_id in ids:
            x, y = rows[image_id]
            writer.writerow([image_id, x, y])


def write_partition(path, static_classes, dynamic_classes) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("static_classes=" + ",".join(str(c) for c in sorted(static_classes)) + "\n")
        fh.write("dynamic_classes=" + ",".join(str(c) for c in sorted(dynamic_classes)) + "\n")
