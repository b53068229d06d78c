"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""


class DataError(ValueError):
    """Corpus content that cannot be used (unknown tags, empty corpora)."""


class ParseError(DataError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, checkpoint: str | None = None):
        self.checkpoint = checkpoint
        super().__init__(message)
