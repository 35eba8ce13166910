"""Row-action solvers for component-wise convex systems and dual-energy CT.

Modules: ``core`` (generic nonlinear Kaczmarz engine), ``conditions``
(hypothesis verification), ``spectral`` (measurement model), ``projector``
(discrete X-ray transform), ``phantom`` (ellipse phantoms), ``recon``
(reconstruction pipelines), ``cli`` (experiment runner).
"""

from . import _kernels
from .core import (
    ComponentSystem,
    IterationTrace,
    SelectionStrategy,
    StopRule,
    affine_system,
    nkm_step,
    run,
    select_cyclic,
    select_max_residual,
    select_positive_cyclic,
    select_theta_residual,
)

__version__ = "0.1.0"


def kernel_backend():
    """Active kernel backend name: 'compiled' or 'python'."""
    return _kernels.backend()


__all__ = [
    "ComponentSystem",
    "IterationTrace",
    "SelectionStrategy",
    "StopRule",
    "affine_system",
    "kernel_backend",
    "nkm_step",
    "run",
    "select_cyclic",
    "select_max_residual",
    "select_positive_cyclic",
    "select_theta_residual",
]
