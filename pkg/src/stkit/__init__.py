"""Spatiotemporal CNN kit: I3D, I2D, S3D and S3D-G on a numpy autodiff core."""

from .analysis import Convention, CostReport, count_flops, count_params, reversal_probe, tradeoff_curve, weight_offset_stats
from .netbuilder import ArchSpec, LayerSpec, Network, build_variant, describe, inflate, parse, preset, serialize
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "Convention",
    "CostReport",
    "LayerSpec",
    "Network",
    "Tensor",
    "backward",
    "build_variant",
    "count_flops",
    "count_params",
    "describe",
    "inflate",
    "no_grad",
    "parse",
    "precision",
    "preset",
    "reversal_probe",
    "serialize",
    "tradeoff_curve",
    "weight_offset_stats",
]
