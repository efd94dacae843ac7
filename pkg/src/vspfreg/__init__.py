"""Rigid NMI registration driven by voxel sampling probability fields.

Submodules: :mod:`volume`, :mod:`transform`, :mod:`similarity`,
:mod:`sampling`, :mod:`estimator`, :mod:`optimizer`, :mod:`registration`,
:mod:`learning`, :mod:`bench`, :mod:`cli`.
"""

from .kernels import BACKEND
from .registration import RegistrationConfig, RegistrationResult, register
from .sampling import SamplingField, solve_vspf
from .transform import RigidParams
from .volume import Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "RegistrationConfig",
    "RegistrationResult",
    "register",
    "SamplingField",
    "solve_vspf",
    "RigidParams",
    "Volume",
    "load_volume",
    "save_volume",
]
