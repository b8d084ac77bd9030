"""Training-free diffusion sampling with a smoothed empirical score."""

__version__ = "0.1.0"

from .core import DiffusionConfig, Dataset, NoiseSchedule, circle_dataset, load_dataset, save_points
from .errors import (CapabilityError, ConfigError, DomainError, GeoscoreError, NumericalError,
                     ParseError)
from .kernels import (AnisotropicGaussian, FixedStencil, IsotropicGaussian, LevelSetAdapted,
                      ShiftedManifoldAdapted, kernel_from_dict)
from .manifolds import (Affine, BumpCurve, Circle, CurveCloud, WavyCircle, manifold_from_dict)
from .rng import RngSeed, stream
from .sampler import kde_sample, pf_log_likelihood, pf_ode_solve, reverse_sde_sample
from .smoothing import SmoothedScoreModel

__all__ = [
    "Affine", "AnisotropicGaussian", "BumpCurve", "CapabilityError", "Circle", "ConfigError",
    "CurveCloud", "Dataset", "DiffusionConfig", "DomainError", "FixedStencil", "GeoscoreError",
    "IsotropicGaussian", "LevelSetAdapted", "NoiseSchedule", "NumericalError", "ParseError",
    "RngSeed", "ShiftedManifoldAdapted", "SmoothedScoreModel", "WavyCircle", "circle_dataset",
    "kde_sample", "kernel_from_dict", "load_dataset", "manifold_from_dict", "pf_log_likelihood",
    "pf_ode_solve", "reverse_sde_sample", "save_points", "stream",
]
