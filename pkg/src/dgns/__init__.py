"""dgns: hybrid deformable Gaussian splatting + dynamic neural SDF
reconstruction of deforming scenes from monocular video."""

__version__ = "0.1.0"

from dgns.autodiff import DiffArray, Param, Tape, tape_backward  # noqa: F401
