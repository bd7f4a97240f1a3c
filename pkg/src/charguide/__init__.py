"""Characteristic guidance for denoising diffusion samplers.

Analytic and empirical score models, classifier-free and characteristic
guidance with fixed-point solvers, four backward samplers, a Landau-Ginzburg
lattice reference, evaluation metrics and a config-driven experiment runner.
"""

from .schedule import NoiseSchedule, build_linear_schedule, sigma_of_time
from .score_models import GaussianModel, KernelDataset, KernelModel, MixtureModel
from .guidance import (
    GuidanceSpec,
    SolverParams,
    SolverTrace,
    characteristic_eps,
    classifier_free_eps,
    closed_form_delta_x_gaussian,
)

__version__ = "0.1.0"
