"""Exception types raised across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class BehindCamera(SplatError):
    pass


class InvalidIndex(SplatError, IndexError):
    pass


class StaleSnapshot(SplatError):
    """The map changed between a render and its backward pass."""


class EmptyDepth(SplatError):
    pass


class Diverged(SplatError):
    pass


class MissingIndexFile(SplatError, FileNotFoundError):
    pass


class MalformedLine(SplatError, ValueError):
    def __init__(self, path, line_no, message=""):
        self.path = str(path)
        self.line_no = line_no
        text = f"{self.path}:{line_no}: malformed line"
        if message:
            text += f" ({message})"
        super().__init__(text)


class NoAssociations(SplatError):
    pass


class TooFewPoses(SplatError):
    pass


class DimensionMismatch(SplatError, ValueError):
    pass


class TooSmall(SplatError, ValueError):
    pass


class EmptyMask(SplatError, ValueError):
    pass


class BadCheckpoint(SplatError):
    pass
