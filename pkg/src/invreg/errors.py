"""Exception types shared across the package."""


class InvRegError(Exception):
    pass


class ConfigurationError(InvRegError, ValueError):
    pass


class UsageError(InvRegError, RuntimeError):
    pass


class PreconditionError(InvRegError, ValueError):
    pass


class EmptySubset(InvRegError):
    pass


class NoNegatives(InvRegError):
    pass


class DegenerateBatch(InvRegError):
    pass


class EmptySubsetPartition(InvRegError):
    pass


class PartitionLearningFailed(InvRegError):
    pass


class DivergenceError(InvRegError, FloatingPointError):
    pass


class IngestionError(InvRegError, ValueError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class EvaluationError(InvRegError, ValueError):
    pass
