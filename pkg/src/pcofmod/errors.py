"""Exception hierarchy shared by all pcofmod modules."""


class PcofError(Exception):
    """Base class for every error raised by pcofmod."""


class InvalidArgumentError(PcofError, ValueError):
    pass


class EmptyLatticeError(PcofError):
    pass


class EmptyTemplateError(PcofError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class RenderOutOfFrameError(PcofError):
    pass


class ModelFormatError(PcofError):
    """Raised when a model file cannot be decoded."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class InsufficientDataError(PcofError):
    pass


class DegenerateGeometryError(PcofError):
    pass


class ICPDivergedError(PcofError):
    pass
