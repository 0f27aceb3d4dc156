"""Exception hierarchy shared by all modules.

Configuration problems derive from :class:`ConfigError` (CLI exit code 2),
iterative solver failures from :class:`NoConvergence` (CLI exit code 3).
"""


class StackelbergError(Exception):
    """Base class for all package errors."""


class ConfigError(StackelbergError, ValueError):
    """Invalid configuration or invalid user-supplied data."""


class ContractViolation(StackelbergError, ValueError):
    """A field does not conform to the mesh or grid it is used with."""


class ExprSyntaxError(ConfigError):
    """Malformed expression text.

    Parameters
    ----------
    message : str
        Description of the problem.
    offset : int
        Byte offset into the expression text where parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ConfigError):
    """Identifier not allowed in the expression context."""


class ArityError(ConfigError):
    """Function called with the wrong number of arguments."""


class UnboundIdentifierError(StackelbergError, KeyError):
    """Identifier has no value at evaluation time."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unbound identifier"


class NonFiniteError(StackelbergError, ArithmeticError):
    """Evaluation produced a division by zero, NaN or infinity."""


class EllipticityViolation(ConfigError):
    """Diffusion samples are not uniformly positive."""


class CriticalPointOutsideOmegaPrime(ConfigError):
    """The Morse function's critical point does not lie in the observation set."""


class MultipleCriticalPoints(ConfigError):
    """The Morse function has more than one interior critical point."""


class RhoWeightInfinite(StackelbergError, ArithmeticError):
    """A rho-weighted norm overflows: the target does not vanish fast enough at t=T."""


class DenominatorUnderflow(StackelbergError, ArithmeticError):
    """A quotient denominator is below the floating-point floor."""


class TimeOutOfRange(StackelbergError, ValueError):
    """A weight was requested outside the open interval (0, T)."""


class SolverError(StackelbergError, RuntimeError):
    """Base class for numerical solver failures."""


class SingularStepError(SolverError):
    """A time-step matrix could not be factorized.

    Parameters
    ----------
    level : int
        Time level of the failing step matrix.
    """

    def __init__(self, level, detail=""):
        msg = f"singular step matrix at time level {level}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.level = level


class NoConvergence(SolverError):
    """An iterative method did not reach its tolerance.

    Parameters
    ----------
    iterations : int
        Number of iterations performed.
    residual : float
        Last residual (or contraction rate) measured.
    """

    def __init__(self, iterations, residual, what="iteration"):
        super().__init__(
            f"{what} did not converge after {iterations} iterations "
            f"(last residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


class PerStepNoConvergence(NoConvergence):
    """Per-step nonlinear iteration failed at a given time step."""

    def __init__(self, step, iterations, residual):
        super().__init__(iterations, residual, what=f"per-step Picard at step {step}")
        self.step = step


class OuterNoConvergence(NoConvergence):
    """Outer fixed-point loop of the semilinear pipeline failed."""


class NonFiniteIterate(SolverError):
    """An iterate became NaN or infinite."""
