"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AltsegError(Exception):
    """Base class for all package errors."""


class ValidationError(AltsegError):
    """A domain object or argument violates its invariants."""


class ShapeError(ValidationError):
    """An array has the wrong rank, shape, or channel count."""


class ModalityError(ValidationError):
    """A volume was routed to the wrong modality's pipeline."""


class ConfigError(AltsegError):
    """A configuration is inconsistent or unsupported."""


class CompatibilityError(AltsegError):
    """Two artifacts (cache, checkpoint, manifest) do not belong together."""


class FormatError(AltsegError):
    """A file on disk is truncated, corrupt, or not in the expected format."""


class ProtocolError(AltsegError):
    """An external provider returned malformed results."""


class TrainingDivergedError(AltsegError):
    """Training produced a non-finite loss."""
