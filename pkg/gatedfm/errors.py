"""
Exception hierarchy.

Everything a caller can fix by changing its input (schemas, rows, configs,
manifests, checkpoint files) is a `ValueError` subclass, so code that already
guards with ``except ValueError`` keeps working.  Runtime failures of the
optimisation itself (a diverging loss) are `RuntimeError`s.
"""

from __future__ import annotations

from typing import Any, Optional


class GatedFMError(Exception):
    """Marker base shared by every error raised by this package."""


class SchemaError(GatedFMError, ValueError):
    pass


class IngestError(GatedFMError, ValueError):
    pass


class ConfigError(GatedFMError, ValueError):
    pass


class ModeError(GatedFMError, ValueError):
    """Interaction mode and the parameters supplied for it disagree."""


class ManifestError(GatedFMError, ValueError):
    pass


class CheckpointError(GatedFMError, ValueError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class NonFiniteGradientError(GatedFMError, ValueError):
    def __init__(self, tensor: str):
        super().__init__(f"Non-finite gradient in tensor '{tensor}'")
        self.tensor = tensor


class DivergenceError(GatedFMError, RuntimeError):
    """Training produced a non-finite loss; `report` holds what was logged so far."""

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report
