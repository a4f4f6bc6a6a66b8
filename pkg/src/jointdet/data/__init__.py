"""Annotation formats, augmentation and the synthetic dataset generator."""

from .augment import AugmentationPolicy, augment, flip_box
from .manifest import DatasetManifest, ManifestError, load_manifest, save_manifest
from .synthetic import ConfigError, SyntheticConfig, generate_synthetic

__all__ = [
    "AugmentationPolicy", "ConfigError", "DatasetManifest", "ManifestError",
    "SyntheticConfig", "augment", "flip_box", "generate_synthetic", "load_manifest",
    "save_manifest",
]
