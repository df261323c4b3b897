"""Offline exporter: CNN local features + semantic labels to SRLF files."""

from .export import ExportConfig, ExportResult, export_features
from .networks import (
    CLASS_NAMES,
    DYNAMIC_CLASSES,
    FEATURE_DEPTH,
    STATIC_CLASSES,
)

__version__ = "0.1.0"
