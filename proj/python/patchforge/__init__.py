"""Dual field-of-view patch CNN for liver lesion detection.

The heavy lifting lives in the compiled ``_core`` extension; this package
re-exports it.
"""

from ._core import (  # noqa: F401
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    DomainError,
    Error,
    FormatError,
    GenerationError,
    IndexError,
    IoError,
    Network,
    config_keys,
    connected_components,
    conv2d,
    cross_validate,
    effective_config,
    equivalent_diameter_mm,
    extract_patch_pair,
    fuse_non_lesion,
    generate_case,
    generate_dataset,
    label_pixel,
    load_cases,
    lr_at_epoch,
    resample_patch,
    softmax,
)

__version__ = "0.1.0"
