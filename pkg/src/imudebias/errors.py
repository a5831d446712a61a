"""Exception hierarchy shared across the package.

Every error raised on bad input derives from ``ImuDebiasError`` (itself a
``ValueError``) so the CLI can map it to the user-error exit code.
"""


class ImuDebiasError(ValueError):
    pass


class NotSkew(ImuDebiasError):
    pass


class NearSingular(ImuDebiasError):
    pass


class BadTimeline(ImuDebiasError):
    pass


class ShapeMismatch(ImuDebiasError):
    pass


class OutOfRange(ImuDebiasError):
    pass


class NonFinite(ImuDebiasError):
    pass


class BadConfig(ImuDebiasError):
    pass


class MisalignedTimeline(ImuDebiasError):
    pass


class TooShort(ImuDebiasError):
    pass


class LengthMismatch(ImuDebiasError):
    pass


class Diverged(ImuDebiasError):
    pass


class MissingFile(ImuDebiasError):
    pass


class BadRow(ImuDebiasError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class NonMonotoneTime(ImuDebiasError):
    pass


class NoOverlap(ImuDebiasError):
    pass
