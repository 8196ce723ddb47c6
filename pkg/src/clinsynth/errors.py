"""Exception types shared across modules; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent user configuration (exit code 2)."""


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared mid-computation (exit code 3)."""


class SubjectError(RuntimeError):
    """Wraps a failure with the subject it happened on; ``cause`` keeps the original."""

    def __init__(self, subject_id: str, cause: Exception):
        super().__init__(f"subject {subject_id}: {cause}")
        self.subject_id = subject_id
        self.cause = cause
