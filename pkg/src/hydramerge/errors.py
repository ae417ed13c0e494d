"""Exception hierarchy shared across the package."""


class HydraMergeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(HydraMergeError, ValueError):
    """Operands have incompatible or malformed shapes."""


class ParameterError(HydraMergeError, ValueError):
    """A numeric or structural parameter is outside its legal range."""


class DegenerateInputError(HydraMergeError, ValueError):
    """Input is degenerate for the requested operation (e.g. a zero matrix
    passed to the cosine distance)."""


class ArchiveFormatError(HydraMergeError, ValueError):
    """Bytes on disk do not parse as an LRTA v1 archive."""


class ValidationError(HydraMergeError, ValueError):
    """Structurally parseable data violates a collection or bundle invariant."""
