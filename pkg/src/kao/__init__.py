"""Kernel-adaptive diffusion inpainting with latent-space conditioning, at desk scale."""

from .errors import ConfigError, DataError, DivergenceError, DomainError, KaoError
from .grid import Grid, SeededRng, check_gradient, gaussian_sample
from .schedule import NoiseSchedule, build_schedule, forward_step, marginal_sample, posterior_params

__version__ = "0.1.0"
