"""Exception types shared across the package."""


class VasoGrowError(Exception):
    """Base class for all package-specific errors."""


class StructureError(VasoGrowError):
    """A vessel tree violates structural requirements (cycles, orphan nodes, ...)."""


class DomainError(VasoGrowError):
    """A perfusion domain is degenerate or a query lies outside its support."""


class SamplingError(VasoGrowError):
    """Rejection sampling failed to place the requested number of points."""


class ConvergenceError(VasoGrowError):
    """An iterative solver exhausted its budget without meeting its tolerance."""


class WellPosednessError(VasoGrowError):
    """A discrete system is singular or missing a pressure-fixing sink."""


class ConfigError(VasoGrowError):
    """A scenario configuration file is malformed or inconsistent."""


class PhysicalRangeError(VasoGrowError):
    """A constitutive inversion left its admissible range."""


class DevascularizationError(VasoGrowError):
    """A resection left a tree with no active terminals to carry flow."""


class ReportError(VasoGrowError):
    """A report was requested over an empty selection or bad samples."""
