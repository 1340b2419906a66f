"""Exception types shared across the package."""


class YolofaceError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(YolofaceError, ValueError):
    """Tensor extents or layer geometry violate an operation's contract."""


class NumericsError(YolofaceError, ArithmeticError):
    """An operation produced a non-finite value (NaN/Inf)."""


class ConfigError(YolofaceError, ValueError):
    """Invalid or inconsistent model/augmentation configuration."""


class FormatError(YolofaceError, ValueError):
    """Malformed annotation, prediction or report file.

    Carries the offending file location when known.
    """

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += str(path)
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class ArchiveError(YolofaceError, ValueError):
    """Malformed or inconsistent tensor archive."""


class BadMagicError(ArchiveError):
    """File does not start with the archive magic."""


class UnsupportedVersionError(ArchiveError):
    """Archive format version is not understood by this build."""


class TruncatedPayloadError(ArchiveError):
    """A tensor extent points past the end of the file."""


class OverlappingTensorsError(ArchiveError):
    """Two tensor payloads overlap in the file."""


class MissingTensorError(ArchiveError):
    """A parameter required by the model is absent from the archive."""

    def __init__(self, name):
        super().__init__(f"archive is missing tensor {name!r}")
        self.name = name
