"""Physics-informed 3D point-source localization with a rotating PSF.

Library layout:

- :mod:`rpsfloc.optics`    PSF dictionary synthesis from a spiral-phase pupil
- :mod:`rpsfloc.forward`   linear image-formation operator, adjoint, noise
- :mod:`rpsfloc.scene`     synthetic scenes and dataset generation
- :mod:`rpsfloc.losses`    fidelity terms, sparsity penalties, prox maps
- :mod:`rpsfloc.solvers`   variational reconstruction and refinement
- :mod:`rpsfloc.postproc`  threshold + cluster point extraction
- :mod:`rpsfloc.evaluate`  matching, precision/recall, CSV + plot reports
- :mod:`rpsfloc.io`        array/dictionary/scene file formats, manifests
- :mod:`rpsfloc.cli`       command-line interface
"""

__version__ = "0.1.0"

from .errors import (
    CapacityError,
    ConfigurationError,
    DataError,
    DivergenceError,
    DomainError,
    RpsflocError,
    ShapeError,
)
from .optics import OpticalConfig, PsfDictionary, build_dictionary

__all__ = [
    "__version__",
    "RpsflocError",
    "ConfigurationError",
    "DomainError",
    "ShapeError",
    "CapacityError",
    "DataError",
    "DivergenceError",
    "OpticalConfig",
    "PsfDictionary",
    "build_dictionary",
]
