"""Exception hierarchy. The CLI maps these onto exit codes."""


class HistPromptError(Exception):
    exit_code = 3


class ConfigError(HistPromptError, ValueError):
    """Bad configuration: wrong channel counts, unknown keys, invalid flags."""

    exit_code = 2


class DimensionError(HistPromptError, ValueError):
    exit_code = 3


class GeometryError(HistPromptError, ValueError):
    exit_code = 3


class MemoryEmptyError(HistPromptError, RuntimeError):
    exit_code = 3


class SnapshotError(HistPromptError, ValueError):
    """Malformed memory or weight snapshot (bad magic, version, sizes)."""

    exit_code = 3


class FrameOrderError(HistPromptError, ValueError):
    """A memory insert whose frame id does not follow the stored ones."""

    exit_code = 3
