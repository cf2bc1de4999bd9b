# errors.py
"""Exception hierarchy + exit codes dipakai semua modul dan CLI."""

# =========================
# EXIT CODES
# =========================
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ARTIFACT = 4


class FairgenError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(FairgenError, ValueError):
    exit_code = EXIT_CONFIG


class SpecError(ConfigError):
    """Invalid synthesis spec (bad probabilities, mean length out of range)."""


class NumericError(FairgenError, ArithmeticError):
    """Non-finite value in a forward pass, gradient or loss."""

    exit_code = EXIT_NUMERIC


class ArtifactMissingError(FairgenError, FileNotFoundError):
    exit_code = EXIT_ARTIFACT


class DimensionError(FairgenError, ValueError):
    pass


class ContractError(FairgenError, RuntimeError):
    pass


class DomainError(FairgenError, ValueError):
    pass


class ValidationError(FairgenError, ValueError):
    pass


class ParseError(FairgenError, ValueError):
    def __init__(self, message: str, line_no: int = None, field: str = None):
        self.line_no = line_no
        self.field = field
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)
