"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class SlidergenError(Exception):
    """Base class for package-specific failures."""


class SpecValidationError(SlidergenError, ValueError):
    """Bad configuration, bad request fields, or contract violations."""


class NumericError(SlidergenError, RuntimeError):
    """Non-finite values encountered during model evaluation or training."""
