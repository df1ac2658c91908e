from ._dwpseg import (
    ConfigError,
    FormatError,
    MissingArtifactError,
    default_config,
    dice,
    generate_volume,
    iou,
    load_config,
    make_splits,
    read_volume,
    run_table,
    sample_prior,
    unet_param_count,
    version,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "MissingArtifactError",
    "default_config",
    "dice",
    "generate_volume",
    "iou",
    "load_config",
    "make_splits",
    "read_volume",
    "run_table",
    "sample_prior",
    "unet_param_count",
    "version",
]
