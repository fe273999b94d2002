"""Exception types raised across the package."""


class HtmmError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSpec(HtmmError):
    """A model specification violates its structural constraints."""


class ShapeMismatch(HtmmError):
    """A matrix does not have the required shape or sparsity pattern."""


class NotDiagonalizable(HtmmError):
    """The transition matrix cannot be diagonalized reliably."""


class NotIrreducible(HtmmError):
    """The non-bleached block of the transition matrix is reducible."""


class DegenerateDiagonal(HtmmError):
    """Two diagonal entries coincide where distinct values are required."""


class NotLumpable(HtmmError):
    """The chain is not lumpable with respect to the given partition.

    Attributes carry the offending block pair and the largest deviation
    between block-column sums.
    """

    def __init__(self, msg, blocks=None, deviation=None):
        super().__init__(msg)
        self.blocks = blocks
        self.deviation = deviation


class ComplexSpectrum(HtmmError):
    """Spectral coefficients were requested for a complex spectrum."""


class OutOfDomain(HtmmError):
    """Function argument outside its mathematical domain."""


class OutOfConvergenceRegion(HtmmError):
    """Generating-function argument outside the convergence region."""


class ConstraintViolation(HtmmError):
    """Second-order parameters violate the coefficient constraints."""


class InconsistentQ00(HtmmError):
    """Inner-model and outer-model bright-stay probabilities disagree."""


class BudgetExceeded(HtmmError):
    """Exact enumeration would exceed the configured path budget."""


class InsufficientData(HtmmError):
    """Not enough data points for the requested statistic."""


class SigmaNotPD(HtmmError):
    """Model covariance is not positive definite even after jitter."""


class DegenerateTrace(HtmmError):
    """Trace carries too little structure to initialize a fit."""


class NoConvergence(HtmmError):
    """Optimization finished without meeting the convergence criterion.

    The partially optimized result is attached as ``result``.
    """

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class IllConditioned(HtmmError):
    """Regression input spans too narrow a range to be trusted."""
