# Exception hierarchy shared by every package.


class GranularError(Exception):
    """Base class for all errors raised by this project."""


class TaxonomyError(GranularError, ValueError):
    """A label hierarchy is malformed or violates an invariant."""


class DataError(GranularError, ValueError):
    """A dataset file or in-memory dataset is invalid."""


class ShapeError(GranularError, ValueError):
    """Tensor operands have incompatible shapes."""


class ConfigError(GranularError, ValueError):
    """A configuration file or value is invalid."""


class NonFiniteError(GranularError, ArithmeticError):
    """A NaN or Inf showed up in a forward value or a gradient."""


class DivergenceError(NonFiniteError):
    """Training loss blew up or became non-finite."""


class GraphError(GranularError, ValueError):
    """A tensor was used with a tape that did not record it."""
