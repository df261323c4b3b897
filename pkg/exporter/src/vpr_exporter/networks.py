"""Backbone and segmentation network construction.

The local-feature backbone is VGG-16 cropped after the last convolution's
ReLU (stride 16, 512 channels).  Semantic labels come from a DeepLabV3
head with the 19 urban-scene classes of the Cityscapes label set; its
pre-softmax activations are max-pooled down to the backbone's grid and
the per-cell class is the argmax.

torchvision ships no Cityscapes-trained DeepLabV3 checkpoint, so
segmentation weights are either loaded from a user-supplied state dict or
randomly initialized (seeded) for deterministic offline runs.
"""

from __future__ import annotations

import torch
from torch import nn
from torchvision.models import VGG16_Weights, vgg16
from torchvision.models.segmentation import deeplabv3_resnet50

FEATURE_DEPTH = 512
FEATURE_STRIDE = 16

# Cityscapes train ids.
CLASS_NAMES = (
    "road", "sidewalk", "building", "wall", "fence", "pole",
    "traffic light", "traffic sign", "vegetation", "terrain", "sky",
    "person", "rider", "car", "truck", "bus", "train", "motorcycle",
    "bicycle",
)
NUM_CLASSES = len(CLASS_NAMES)

# Long-term scenery vs dynamic or task-irrelevant objects.  "Vehicle"
# covers every moving-vehicle class; riders move with their vehicles.
STATIC_CLASSES = (0, 2, 7, 8)  # road, building, traffic sign, vegetation
DYNAMIC_CLASSES = (10, 11, 12, 13, 14, 15, 16, 17, 18)  # sky, person, vehicles

# ImageNet statistics used by the VGG preprocessing.
INPUT_MEAN = (0.485, 0.456, 0.406)
INPUT_STD = (0.229, 0.224, 0.225)


def build_backbone(weights: str, seed: int) -> nn.Module:
    """VGG-16 features cropped at the last convolutional layer's ReLU."""
    if weights == "imagenet":
        base = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    elif weights == "random":
        torch.manual_seed(seed)
        base = vgg16(weights=None)
    else:
        base = vgg16(weights=None)
        state = torch.load(weights, map_location="cpu", weights_only=True)
        base.load_state_dict(state)
    cropped = nn.Sequential(*list(base.features.children())[:-1])
    cropped.eval()
    return cropped


def build_segmenter(weights: str, seed: int) -> nn.Module:
    """DeepLabV3-ResNet50 with the urban-scene class set."""
    torch.manual_seed(seed + 1)
    model = deeplabv3_resnet50(weights=None, weights_backbone=None, num_classes=NUM_CLASSES)
    if weights != "random":
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model
