"""Exception hierarchy shared by all modules."""


class CadisError(Exception):
    pass


class ValidationError(CadisError, ValueError):
    """Input has the wrong shape, range or length."""


class ConfigurationError(CadisError, ValueError):
    """A configuration value names something that does not exist."""


class InputError(CadisError, ValueError):
    """A dataset, directory or manifest cannot support the requested operation."""


class FittingError(CadisError, RuntimeError):
    pass


class TrainingError(CadisError, RuntimeError):
    """Training diverged (non-finite loss) or was asked to run on nothing."""
