"""Exception hierarchy shared across the package."""


class AquagridError(Exception):
    """Base class for all package errors."""


class CaseParseError(AquagridError):
    """Case file is missing or not valid JSON / not the expected shape."""


class CaseValidationError(AquagridError):
    """A loaded case violates a structural invariant.

    ``findings`` carries the individual violation messages.
    """

    def __init__(self, findings):
        self.findings = list(findings)
        super().__init__("case validation failed:\n" + "\n".join(f"  - {f}" for f in self.findings))


class DanglingReferenceError(CaseValidationError):
    """A device refers to a bus/node/pipe id that does not exist."""


class BuildError(AquagridError):
    """A constraint system cannot be constructed from the given case."""


class SolveError(AquagridError):
    """The solver failed in a way that is not an ordinary status outcome."""


class NumericalError(SolveError):
    """Interior-point iteration broke down; carries iterate diagnostics."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
