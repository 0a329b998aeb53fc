"""Exception hierarchy shared by every sisma module.

The CLI maps these onto its exit-code contract, so each class carries the
code it should produce when it escapes a subcommand.
"""


class SismaError(Exception):
    exit_code = 1


class ShapeError(SismaError, ValueError):
    """Tensor dimensions disagree. ``dim`` names the offending axis."""

    exit_code = 2

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class PreconditionError(SismaError, ValueError):
    exit_code = 2


class ValidationError(SismaError, ValueError):
    """One or more validation failures; ``violations`` lists all of them."""

    exit_code = 2

    def __init__(self, message, violations=None):
        self.violations = list(violations or [message])
        super().__init__(message if violations is None else f"{message}: " + "; ".join(self.violations))


class MaskError(ValidationError):
    pass


class ConfigError(SismaError, ValueError):
    exit_code = 2


class NumericError(SismaError, ArithmeticError):
    """A non-finite value appeared. ``where`` names the layer or sampler step."""

    exit_code = 4

    def __init__(self, message, where=None, diagnostics=None):
        super().__init__(message)
        self.where = where
        self.diagnostics = diagnostics or {}


class CheckpointError(SismaError):
    exit_code = 3


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, supported):
        super().__init__(
            f"unsupported checkpoint version {found}; this build reads versions {sorted(supported)}"
        )
        self.found = found
        self.supported = tuple(supported)


class DatasetLoadError(SismaError):
    exit_code = 3

    def __init__(self, report):
        lines = [f"{e.path}: {e.reason}" for e in report.errors]
        super().__init__(f"{len(lines)} file(s) failed to load:\n  " + "\n  ".join(lines))
        self.report = report


class BenchLockError(SismaError):
    exit_code = 3
