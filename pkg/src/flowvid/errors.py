"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numerical failures exit 3.
"""


class FlowvidError(Exception):
    """Base class for package errors."""


class DataError(FlowvidError):
    """Missing, corrupt, or inconsistent on-disk data."""


class NumericalError(FlowvidError):
    """A numerical computation produced NaN/Inf or failed to converge."""

    def __init__(self, message, component=None, step=None):
        if component is not None:
            message = f"{message} (component={component}"
            message += f", step={step})" if step is not None else ")"
        super().__init__(message)
        self.component = component
        self.step = step
