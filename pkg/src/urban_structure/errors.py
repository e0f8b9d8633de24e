"""Exception hierarchy; ``exit_code`` drives the CLI's process status."""


class UrbanStructureError(Exception):
    category = "error"
    exit_code = 1


class InputError(UrbanStructureError, ValueError):
    category = "bad_input"
    exit_code = 2


class InvalidParameterError(InputError):
    category = "invalid_parameter"


class DimensionError(InputError):
    category = "dimension_mismatch"


class ParseError(InputError):
    category = "parse_error"


class NumericalError(UrbanStructureError, ArithmeticError):
    category = "numerical_failure"
    exit_code = 3


class NonPositiveDefiniteError(NumericalError):
    category = "non_positive_definite"


class StepSizeError(NumericalError):
    category = "step_size_underflow"


class EstimatorUndefinedError(NumericalError):
    category = "estimator_undefined"


class ConvergenceError(UrbanStructureError, RuntimeError):
    category = "non_convergence"
    exit_code = 4
