"""Exception hierarchy shared by all modules."""


class SCLError(Exception):
    """Base class for all toolkit errors."""

    #: short tag used by the CLI when reporting numerical failures
    module = "scl"


class StructureError(SCLError):
    """Oracle output has the wrong shape or a matrix fails a structural check."""

    module = "problem_model"


class OracleError(SCLError):
    """A coefficient oracle produced a non-finite value."""

    module = "problem_model"


class AdmissibilityError(SCLError):
    """A control value leaves the control set."""

    module = "problem_model"


class DomainError(SCLError):
    """An argument lies outside the domain on which an operation is defined."""


class IntegrationError(SCLError):
    """Forward simulation blew up (NaN or overflow)."""

    module = "forward_sim"


class ConditioningError(SCLError):
    """Fundamental matrix and its inverse drifted apart beyond tolerance."""

    module = "forward_sim"


class BasisError(SCLError):
    """Regression design matrix is rank deficient."""

    module = "adjoint_solver"


class ConfigError(SCLError):
    """Invalid run configuration."""

    module = "cli_reporting"
