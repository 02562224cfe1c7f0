"""Lens-free holography: propagation, classical reconstruction and the Fourier Imager Network."""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, GeometryError, HolofinError, NumericalError
from .optics import (ComplexField, HologramStack, IntensityImage, angular_spectrum_propagate,
                     simulate_hologram, simulate_stack)
from .classical import MhprConfig, autofocus, estimate_shifts, mhpr_reconstruct, pixel_super_resolve
from .fin import FinConfig, FinModel, fin_forward, infer, tile_infer, total_loss, train
from .metrics import FieldMetrics, field_metrics, ssim
from .synth import DEFAULT_SPECS, SampleSpec, build_dataset, generate_sample

__all__ = [
    "__version__", "ConfigError", "FormatError", "GeometryError", "HolofinError", "NumericalError",
    "ComplexField", "HologramStack", "IntensityImage", "angular_spectrum_propagate", "simulate_hologram",
    "simulate_stack", "MhprConfig", "autofocus", "estimate_shifts", "mhpr_reconstruct",
    "pixel_super_resolve", "FinConfig", "FinModel", "fin_forward", "infer", "tile_infer", "total_loss",
    "train", "FieldMetrics", "field_metrics", "ssim", "DEFAULT_SPECS", "SampleSpec", "build_dataset",
    "generate_sample",
]
