from .images import ImageDecodeError, read_image, read_pnm, write_pnm
from .manifest import (
    APPENDIX_MANIFESTS,
    DatasetManifest,
    Item,
    ManifestError,
    appendix_manifest,
    load_manifest,
    read_manifest_file,
    write_manifest_file,
)
from .preprocess import PreprocessSpec, channel_means, preprocess, resize_bilinear
from .splits import SplitError, SplitPlan, make_splits
from .synthetic import CLASS_NAMES, SyntheticDataset, synth_textures, texture_image

__all__ = [
    "APPENDIX_MANIFESTS",
    "CLASS_NAMES",
    "DatasetManifest",
    "ImageDecodeError",
    "Item",
    "ManifestError",
    "PreprocessSpec",
    "SplitError",
    "SplitPlan",
    "SyntheticDataset",
    "appendix_manifest",
    "channel_means",
    "load_manifest",
    "make_splits",
    "preprocess",
    "read_image",
    "read_manifest_file",
    "read_pnm",
    "resize_bilinear",
    "synth_textures",
    "texture_image",
    "write_manifest_file",
    "write_pnm",
]
