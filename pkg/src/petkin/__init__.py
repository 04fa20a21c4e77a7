"""Pixel-wise kinetic parameter reconstruction for dynamic PET phantoms."""

from .kinetics import (InputFunction, KineticParams, TimeGrid, model_and_jacobian,
                       model_curve, solve_forward)
from .optim import FitResult, LmConfig, ResidualProblem, TrConfig, projected_lm, reg_as_tr
from .phantom import (GroundTruth, LabelImage, REGION_PARAMS, input_function,
                      make_phantom, simulate_dynamic)
from .imaging import ParametricMaps, PixelFitPolicy, fit_image, region_stats

__version__ = "0.1.0"

__all__ = [
    "InputFunction", "KineticParams", "TimeGrid", "model_and_jacobian",
    "model_curve", "solve_forward",
    "FitResult", "LmConfig", "ResidualProblem", "TrConfig", "projected_lm", "reg_as_tr",
    "GroundTruth", "LabelImage", "REGION_PARAMS", "input_function",
    "make_phantom", "simulate_dynamic",
    "ParametricMaps", "PixelFitPolicy", "fit_image", "region_stats",
]
