"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad field values, shape mismatches, unknown keys."""


class DegenerateInputError(ValueError):
    """Input too small or empty for the requested operation."""


class TrainingError(RuntimeError):
    """Training cannot proceed (e.g. a transcript unit never observed)."""


class AlignmentInfeasibleError(RuntimeError):
    """No valid forced-alignment path exists (utterance too short)."""


class StageError(RuntimeError):
    """Pipeline stage ordering or artifact problem (missing/mismatched inputs)."""
