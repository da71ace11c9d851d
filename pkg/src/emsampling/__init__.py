"""Orthogonality and direct sampling methods for anisotropic electromagnetic scatterers.

Modules
-------
geometry   unit-sphere quadrature, tangential algebra, spherical Bessel functions
forward    contrast scenes and the FFT-accelerated volume integral equation solver
operators  far-field and Herglotz operators, reciprocity
imaging    OSM and DSM functionals, sweeps, normalization and isovalues
datasets   far-field data, seeded noise, FFP1 and VTK files
config     INI run configurations
verify     numerical checks of the underlying identities and estimates
cli        the ``emsampling`` command
"""

from .datasets import FarFieldData, FormatError, NoiseSpec, add_noise, read_ffp, write_ffp
from .forward import (ContrastScene, SolverConfig, SolverError, assemble_far_field_data,
                      solve_lippmann_schwinger)
from .geometry import DirectionSet, antipodal_symmetrize, fibonacci_directions
from .imaging import SamplingGrid, normalize_volume, sweep

__version__ = "0.1.0"

__all__ = [
    "ContrastScene", "DirectionSet", "FarFieldData", "FormatError", "NoiseSpec",
    "SamplingGrid", "SolverConfig", "SolverError", "add_noise", "antipodal_symmetrize",
    "assemble_far_field_data", "fibonacci_directions", "normalize_volume", "read_ffp",
    "solve_lippmann_schwinger", "sweep", "write_ffp",
]
