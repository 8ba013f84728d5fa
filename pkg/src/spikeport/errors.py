"""Exception hierarchy shared across the toolkit.

All errors raised on bad user input derive from :class:`ToolError` so the
CLI can map them to exit code 2; anything else is treated as an internal
error (exit code 1).
"""


class ToolError(Exception):
    """Base class for errors caused by invalid inputs or configuration."""


class ModelFormatError(ToolError):
    """Malformed manifest, blob mismatch, or invalid graph structure."""


class ShapeError(ToolError):
    """Tensor shapes incompatible with a node's contract."""


class GraphError(ToolError):
    """Structural graph problems: cycles, dangling references."""


class ParseError(ToolError):
    """Raw model cannot be flattened into the core layer vocabulary."""


class CalibrationError(ToolError):
    """Statistics collection or weight normalization failed."""


class SimulationError(ToolError):
    """Spiking simulation misconfigured or fed incompatible data."""
