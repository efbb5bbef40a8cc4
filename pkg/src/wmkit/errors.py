"""Error taxonomy shared across the toolkit.

ConfigError covers bad values in user-supplied configuration (CLI exit code 2).
DataError covers bad or insufficient runtime data, including oracle and training
failures (CLI exit code 3). UsageError marks programmer misuse of an API and is
a ValueError so that sloppy call sites fail loudly in tests.
"""


class WmkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(WmkitError, ValueError):
    """A configuration value is out of range or inconsistent."""


class UsageError(WmkitError, ValueError):
    """An API was called with arguments that violate its preconditions."""


class DataError(WmkitError):
    """Input data is missing, malformed, or insufficient for the operation."""


class TrainingError(DataError):
    """Evaluator training cannot proceed (e.g. single-class dataset)."""
