"""Synthetic de-scattering pipeline for 3D two-photon fluorescence stacks."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .volume import Volume, load_volume, normalize_volume, save_volume, trilinear_resample  # noqa: E402
