"""Exception hierarchy shared across the package."""


class ByzgridError(Exception):
    """Base class for all byzgrid errors."""


# --- case loading / topology ---

class ParseError(ByzgridError):
    """Malformed case, parameter, or config file."""


class TopologyError(ByzgridError):
    """Line graph is not a tree rooted at the substation, or the trading
    graph is structurally invalid."""


class BoundsError(ByzgridError):
    """A lower bound exceeds its upper bound."""


# --- market assembly ---

class RoleError(ByzgridError):
    """Trading pair does not connect exactly one buyer and one seller."""


class LayoutError(ByzgridError):
    """Vector does not match the agent's variable layout."""


# --- numerical kernels ---

class NonConvergence(ByzgridError):
    """Iterative solver exhausted its iteration budget.

    Carries the best iterate and its residual so callers can decide
    whether to continue with it.
    """

    def __init__(self, message, iterate=None, residual=None):
        super().__init__(message)
        self.iterate = iterate
        self.residual = residual


class RankError(ByzgridError):
    """Coupling matrix is rank deficient where full row rank is required."""


class ConvergenceError(ByzgridError):
    """A direct factorization (SVD) failed to converge."""


# --- tensor operations ---

class ModeError(ByzgridError):
    """Mode index outside the tensor's order."""


class DimError(ByzgridError):
    """Matrix/tensor dimensions do not align for the requested product."""


class LengthError(ByzgridError):
    """Sequence too short for the requested embedding or differencing."""


class ShapeError(ByzgridError):
    """Tensor shape incompatible with the requested reshaping."""


# --- detector ---

class InsufficientHistory(ByzgridError):
    """Not enough stored iterations to build a window or fit the model."""


class SingularMoments(ByzgridError):
    """Sample autocovariance system is rank deficient."""


class NumericalError(ByzgridError):
    """A closed-form update produced a singular or non-finite system."""


# --- attacks / engine / cli ---

class FieldError(ByzgridError):
    """Packet lacks the fields the attack needs to corrupt."""


class ConfigError(ByzgridError):
    """Invalid or inconsistent run configuration."""
