"""Exception hierarchy shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class DimensionError(ContractError):
    pass


class DomainError(ContractError):
    pass


class NumericalError(ArithmeticError):
    """A computation produced (or was handed) non-finite or ill-posed values."""


class FormatError(ValueError):
    """A file does not follow its on-disk format."""


class UnsupportedFormatError(FormatError):
    pass


class CheckpointVersionError(FormatError):
    pass


class MissingKeysError(KeyError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing keys: {', '.join(self.missing)}")

    def __str__(self):
        return self.args[0]
