"""Exception hierarchy shared by every module."""


class KMyriadError(Exception):
    """Base class for all package errors."""


class DimensionError(KMyriadError, ValueError):
    """Operand extents are incompatible."""


class DomainError(KMyriadError, ValueError):
    """An argument lies outside the domain of a function."""


class ContractError(KMyriadError, RuntimeError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(KMyriadError, ArithmeticError):
    """A NaN or infinity was about to enter a computation."""


class DegenerateRadiusError(KMyriadError, ValueError):
    """A nearest-neighbor radius is exactly zero."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(int(i) for i in indices)


class BoundaryError(KMyriadError, ValueError):
    """An action lies on or outside the squashed action bounds."""


class TerrainError(KMyriadError, ValueError):
    """Terrain description or placement is invalid."""


class ConfigError(KMyriadError, ValueError):
    """A configuration file or override is invalid."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ChecksumError(KMyriadError, ValueError):
    """A checkpoint payload does not match its stored checksum."""
