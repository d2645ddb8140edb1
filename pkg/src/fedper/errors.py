"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """An argument violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """Parameters or activations became non-finite."""


class AveragingError(ValueError):
    """Federated averaging was called without contributions."""


class NoParticipantsError(RuntimeError):
    """Every selected client was skipped in a round."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. PR-AUC with no positives)."""


class CorpusParseError(ValueError):
    """A corpus file is malformed. Carries the offending path and byte offset."""

    def __init__(self, path, offset: int, reason: str):
        self.path = path
        self.offset = offset
        self.reason = reason
        super().__init__(f"{path}: offset {offset}: {reason}")


class ConfigError(ValueError):
    """A run configuration file is invalid. Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path or '<config>'}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")
