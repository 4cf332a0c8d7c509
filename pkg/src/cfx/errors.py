class CfxError(Exception):
    """Base class for all errors raised by the package."""


class DataFormatError(CfxError):
    pass


class ShapeError(CfxError, ValueError):
    pass


class AdapterError(CfxError):
    """External model process failed or returned an error."""


class DegenerateDatasetError(CfxError):
    pass


class EmptyRuleError(CfxError):
    """No attribution reached the global threshold for this record."""


class AlignmentUnavailable(CfxError):
    pass


class NoTargetError(CfxError):
    pass


class SparsifyError(CfxError):
    pass


class PrototypeError(CfxError):
    pass
