"""Scanner-robust emphysema segmentation toolkit.

Thin Python layer over the C++ core: phantom generation, CDF features,
loss, training and evaluation.
"""

from ._core import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DivergenceError,
    Error,
    FormatError,
    GenerationError,
    IoError,
    build_dataset,
    cdf_of_scan,
    dsc,
    evaluate,
    lr_at,
    percent_emphysema,
    read_manifest,
    read_volume,
    scanner_prior,
    segmentation_loss,
    train,
    write_prior,
    write_volume,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "DivergenceError",
    "Error",
    "FormatError",
    "GenerationError",
    "IoError",
    "build_dataset",
    "cdf_of_scan",
    "dsc",
    "evaluate",
    "lr_at",
    "percent_emphysema",
    "read_manifest",
    "read_volume",
    "scanner_prior",
    "segmentation_loss",
    "train",
    "write_prior",
    "write_volume",
]
