"""Batch export of local features and semantic labels from real images."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import networks, srlf

logger = logging.getLogger("vpr_exporter")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


@dataclass
class ExportConfig:
    image_dir: Path
    manifest_path: Path
    output_dir: Path
    vgg_weights: str = "imagenet"  # "imagenet", "random", or a checkpoint path
    seg_weights: str = "random"  # "random" or a checkpoint path
    seed: int = 0
    resize: tuple[int, int] | None = None  # (width, height)
    batch_size: int = 4
    max_failure_fraction: float = 0.01


@dataclass
class ExportResult:
    exported: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return len(self.exported) + len(self.failed)


def _load_image(path: Path, resize: tuple[int, int] | None) -> torch.Tensor:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resize is not None:
            img = img.resize(resize, Image.BILINEAR)
        data = np.asarray(img, dtype=np.float32) / 255.0
    if data.shape[0] < networks.FEATURE_STRIDE or data.shape[1] < networks.FEATURE_STRIDE:
        raise ValueError(f"image {path.name} smaller than one feature cell")
    mean = np.array(networks.INPUT_MEAN, dtype=np.float32)
    std = np.array(networks.INPUT_STD, dtype=np.float32)
    data = (data - mean) / std
    return torch.from_numpy(data.transpose(2, 0, 1))


def _infer_one(
    backbone: torch.nn.Module, segmenter: torch.nn.Module, tensor: torch.Tensor
) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        feats = backbone(tensor[None])[0]  # (512, h, w)
        logits = segmenter(tensor[None])["out"]  # (1, C, H, W)
        pooled = torch.nn.functional.adaptive_max_pool2d(logits, feats.shape[1:])[0]
        probs = torch.softmax(pooled, dim=0)
        labels = torch.argmax(probs, dim=0)
    features = feats.permute(1, 2, 0).numpy().astype(np.float32)  # (h, w, 512)
    return features, labels.numpy().astype(np.uint16)


def export_features(config: ExportConfig) -> ExportResult:
    """Run both networks over every image and write SRLF files + manifests.

    Images are deterministic given the seed and weight choices: inference
    runs in eval mode on the CPU with a single torch thread.  Per-image
    failures are logged and skipped; the caller decides what failure rate
    is fatal.
    """
    torch.set_num_threads(1)
    header, rows = srlf.read_manifest(config.manifest_path)
    backbone = networks.build_backbone(config.vgg_weights, config.seed)
    segmenter = networks.build_segmenter(config.seg_weights, config.seed)

    config.output_dir.mkdir(parents=True, exist_ok=True)
    features_dir = config.output_dir / "features"
    features_dir.mkdir(exist_ok=True)

    images = sorted(
        p for p in config.image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    result = ExportResult()
    resolutions: dict[str, list[int]] = {}
    for path in images:
        image_id = path.stem
        try:
            if image_id not in rows:
                raise KeyError(f"no geotag in manifest for {image_id!r}")
            tensor = _load_image(path, config.resize)
            features, labels = _infer_one(backbone, segmenter, tensor)
            if features.shape[2] != networks.FEATURE_DEPTH:
                raise ValueError(f"unexpected feature depth {features.shape[2]}")
            srlf.write_srlf(features_dir / f"{image_id}.srlf", image_id, features, labels)
            resolutions[image_id] = [int(tensor.shape[2]), int(tensor.shape[1])]
            result.exported.append(image_id)
        except Exception as exc:  # per-image failures must not kill the batch
            logger.warning("skipping %s: %s", path.name, exc)
            result.failed[image_id] = str(exc)

    srlf.write_manifest(config.output_dir / "manifest.csv", header, result.exported, rows)
    srlf.write_partition(
        config.output_dir / "partition.cfg",
        networks.STATIC_CLASSES,
        networks.DYNAMIC_CLASSES,
    )
    metadata = {
        "backbone": "vgg16-conv5_3-relu",
        "feature_depth": networks.FEATURE_DEPTH,
        "feature_stride": networks.FEATURE_STRIDE,
        "segmenter": "deeplabv3_resnet50",
        "class_names": list(networks.CLASS_NAMES),
        "vgg_weights": config.vgg_weights,
        "seg_weights": config.seg_weights,
        "seed": config.seed,
        "resize": list(config.resize) if config.resize else None,
        "input_resolutions": resolutions,
        "failed": result.failed,
    }
    with open(config.output_dir / "export_meta.json", "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result
