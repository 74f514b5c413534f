"""Exception types shared across the toolkit."""


class GseError(Exception):
    """Base class for all gsekit errors."""


class FormatError(GseError):
    """A case/measurement/scenario file does not conform to the documented schema.

    Carries enough context (section, line number) to point at the offending
    line in the input file.
    """

    def __init__(self, message, section=None, line_no=None):
        loc = []
        if section is not None:
            loc.append(f"section [{section}]")
        if line_no is not None:
            loc.append(f"line {line_no}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.section = section
        self.line_no = line_no


class CaseValidationError(GseError):
    """A parsed case violates one or more model invariants."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MeasurementError(GseError):
    """A measurement snapshot is inconsistent with its case."""


class AssemblyError(GseError):
    """The measurement circuit cannot be assembled into a well-posed system."""


class SingularNetworkError(GseError):
    """A linear network solve hit a singular admittance matrix (floating island)."""


class SolverFailure(GseError):
    """The WLAV solver did not produce a usable solution."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
