"""Exception types raised across the package."""


class PilotWaveError(Exception):
    """Base class for all package errors."""


class GridError(PilotWaveError, ValueError):
    pass


class ZeroNorm(PilotWaveError, ValueError):
    pass


class BasisMismatch(PilotWaveError, ValueError):
    pass


class BoundaryUnsupported(PilotWaveError, ValueError):
    pass


class PointerOverflow(PilotWaveError, ValueError):
    pass


class NodeProximity(PilotWaveError, ArithmeticError):
    """The evaluation point sits where |psi|^2 is below the node threshold."""


class StuckAtNode(PilotWaveError, RuntimeError):
    pass


class BadDensity(PilotWaveError, ValueError):
    pass


class SupportMismatch(PilotWaveError, ValueError):
    pass


class OverlapError(PilotWaveError, ValueError):
    pass


class BranchOverlap(PilotWaveError, ValueError):
    pass


class ResolutionTooCoarse(PilotWaveError, ValueError):
    pass


class PacketOverlap(PilotWaveError, ValueError):
    pass


class ParseError(PilotWaveError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PilotWaveError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)


class SnapshotError(PilotWaveError, IOError):
    pass


class MagicMismatch(SnapshotError):
    pass


class TruncatedFile(SnapshotError):
    pass


class VersionUnsupported(SnapshotError):
    pass


class CFLWarning(UserWarning):
    """Kinetic phase per split step is large at the Nyquist mode."""
