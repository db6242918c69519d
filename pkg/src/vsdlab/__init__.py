"""Score-distillation laboratory: SDS and VSD particle optimisation against
analytic Gaussian-mixture diffusion targets."""

__version__ = "0.1.0"
