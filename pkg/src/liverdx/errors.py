"""Exception types. Each carries a short machine-readable ``code`` used by the CLI."""


class LiverDxError(Exception):
    code = "ERROR"


class ConfigError(LiverDxError, ValueError):
    code = "CONFIG_INVALID"


class CorruptDataError(LiverDxError):
    code = "CORRUPT_DATA"


class FormatError(LiverDxError):
    code = "FORMAT_MISMATCH"


class PhaseError(LiverDxError, ValueError):
    code = "BAD_PHASES"


class MatchingError(LiverDxError, ValueError):
    code = "TOO_FEW_QUERIES"


class NormalizationError(LiverDxError, ValueError):
    code = "NOT_UNIT_NORM"


class EmptyLiverError(LiverDxError, ValueError):
    code = "EMPTY_LIVER"


class NonFiniteLossError(LiverDxError, FloatingPointError):
    code = "NON_FINITE_LOSS"


class CheckpointMismatchError(LiverDxError):
    code = "CHECKPOINT_MISMATCH"


class EmptySplitError(LiverDxError, ValueError):
    code = "EMPTY_SPLIT"
