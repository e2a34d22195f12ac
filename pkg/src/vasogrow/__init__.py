"""vasogrow: synthetic vascular trees, multi-compartment perfusion and
perfusion-driven tissue growth."""

__version__ = "0.1.0"

from .tree import HemodynamicParams, VesselTree  # noqa: F401
