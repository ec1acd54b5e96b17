"""Exception hierarchy shared by every module."""


class MFEViTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MFEViTError, ValueError):
    pass


class NumericError(MFEViTError, ArithmeticError):
    pass


class LabelError(MFEViTError, IndexError):
    pass


class ConfigError(MFEViTError, ValueError):
    pass


class ContractError(MFEViTError, RuntimeError):
    pass


class BookkeepingError(MFEViTError, KeyError):
    pass


class ManifestError(MFEViTError, ValueError):
    pass
