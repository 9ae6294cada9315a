"""Exception types shared across the toolkit."""


class Box4DError(Exception):
    """Base class for all toolkit errors."""


class NonPositiveDepth(Box4DError, ValueError):
    pass


class EmptySet(Box4DError, ValueError):
    pass


class PlacementFailure(Box4DError, RuntimeError):
    pass


class ConfigError(Box4DError, ValueError):
    pass


class SchemaError(Box4DError, ValueError):
    """Malformed or unsupported on-disk document.

    ``path`` names the offending field (e.g. ``frames[3].pose``) when known.
    """

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class InstanceMismatch(Box4DError, ValueError):
    pass


class DimMismatch(Box4DError, ValueError):
    pass
