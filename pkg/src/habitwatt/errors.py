"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class HabitWattError(Exception):
    """Base class. ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 3


class ConfigError(HabitWattError):
    exit_code = 1


class ParameterError(ConfigError):
    pass


class ValidationError(ConfigError):
    pass


class RuleConfigError(ConfigError):
    pass


class FilterError(ConfigError):
    pass


class DataError(HabitWattError):
    exit_code = 2


class FormatError(DataError):
    pass


class OrderingError(DataError):
    pass


class AlignmentError(DataError):
    pass


class CoverageError(DataError):
    pass


class BucketingError(DataError):
    pass


class DependencyError(DataError):
    """An upstream stage artifact is missing."""

    def __init__(self, stage: str, path) -> None:
        super().__init__(f"missing artifact from stage '{stage}': {path}")
        self.stage = stage
        self.path = path


class LifecycleError(HabitWattError):
    pass


class RegistryError(HabitWattError):
    pass


class ConsistencyError(HabitWattError):
    pass
