class QsparseError(Exception):
    """Base class for all errors raised by qsparse."""


class ParameterError(QsparseError, ValueError):
    """An argument or configured parameter is out of its valid range."""


class DataError(QsparseError, ValueError):
    """Input data is malformed (non-finite values, bad labels)."""


class FormatError(DataError):
    """A file does not follow the expected binary layout."""


class UnsupportedError(QsparseError, TypeError):
    """The operation is not defined for the given variant."""


class ConfigError(QsparseError):
    """One or more configuration problems; ``problems`` lists all of them."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
