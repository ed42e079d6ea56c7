"""Python bindings for the bgvc separation and voice conversion core."""

import json

import torch  # noqa: F401  loads libtorch before the extension

from ._core import (
    SAMPLE_RATE,
    ConfigError,
    DataError,
    Error,
    FormatError,
    NumericError,
    ShapeError,
    adv_dis,
    adv_gen,
    apply_crm,
    asym_os,
    config_json,
    convert,
    feat_match,
    istft,
    measured_snr_db,
    mix_at_snr,
    mtl_total,
    plcpa,
    plcpa_asym,
    rec_uni,
    run,
    si_sdr,
    stft,
)


def load_config(path=None):
    """Validated run configuration as a dict; defaults when `path` is None."""
    return json.loads(config_json(str(path) if path is not None else ""))

__all__ = [
    "SAMPLE_RATE",
    "ConfigError",
    "DataError",
    "Error",
    "FormatError",
    "NumericError",
    "ShapeError",
    "adv_dis",
    "adv_gen",
    "apply_crm",
    "asym_os",
    "convert",
    "feat_match",
    "istft",
    "load_config",
    "measured_snr_db",
    "mix_at_snr",
    "mtl_total",
    "plcpa",
    "plcpa_asym",
    "rec_uni",
    "run",
    "si_sdr",
    "stft",
]
