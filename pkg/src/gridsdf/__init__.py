"""Grid-based SDF neural fields with differentiable volume rendering and annealed SDF regularization."""

__version__ = "0.1.0"
