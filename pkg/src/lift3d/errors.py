"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to: 2 for input
validation, 3 for prior-backend trouble, 4 for numeric failure.
"""


class Lift3DError(Exception):
    exit_code = 1


class ValidationError(Lift3DError):
    """Bad inputs: files, configs, shapes, degenerate masks."""

    exit_code = 2

    def __init__(self, message, code="invalid"):
        super().__init__(message)
        self.code = code


class PriorBackendError(Lift3DError):
    """The prior backend failed or is unreachable."""

    exit_code = 3

    def __init__(self, message, timestep=None, view=None):
        super().__init__(message)
        self.timestep = timestep
        self.view = view

    def __str__(self):
        base = super().__str__()
        ctx = []
        if self.timestep is not None:
            ctx.append(f"t={self.timestep}")
        if self.view is not None:
            ctx.append(f"view={self.view}")
        return f"{base} [{', '.join(ctx)}]" if ctx else base


class NumericError(Lift3DError):
    """Non-finite values or an optimization that cannot continue."""

    exit_code = 4


class CheckpointError(ValidationError):
    """Corrupt, truncated, or wrong-kind checkpoint files."""

    def __init__(self, message, code="checkpoint"):
        super().__init__(message, code=code)
