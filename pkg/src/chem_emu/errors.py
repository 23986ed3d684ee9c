"""Exception types shared across the package."""


class ChemEmuError(Exception):
    pass


class DimensionError(ChemEmuError, ValueError):
    """Incompatible tensor shapes."""


class ContractError(ChemEmuError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ChemEmuError, ArithmeticError):
    """NaN or other non-finite input where finite values are required."""


class ConfigError(ChemEmuError, ValueError):
    pass


class ParseError(ChemEmuError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ChemEmuError, ValueError):
    """Malformed binary file (dataset or checkpoint)."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class IntegrationError(ChemEmuError, RuntimeError):
    def __init__(self, message, sample_id=None):
        self.sample_id = sample_id
        if sample_id is not None:
            message = f"sample {sample_id}: {message}"
        super().__init__(message)


class TrainingAborted(ChemEmuError, RuntimeError):
    def __init__(self, message, iteration, checkpoint_path=None):
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
        super().__init__(f"{message} at iteration {iteration}; last good checkpoint: {checkpoint_path}")
