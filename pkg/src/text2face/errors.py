"""Exception hierarchy shared by every module."""


class Text2FaceError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(Text2FaceError, ValueError):
    """Operands of a tensor op have incompatible shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DataError(Text2FaceError):
    """Malformed or missing input data (files, captions, manifests)."""


class CaptionParseError(DataError):
    pass


class NumericError(Text2FaceError):
    """A numeric routine hit a non-finite value or an invalid matrix."""
