"""Exception types shared across the package."""

import numpy as np


class SphereNormError(Exception):
    pass


class DimensionError(SphereNormError, ValueError):
    """Shapes or extents are incompatible."""


class ValidationError(SphereNormError, ValueError):
    """Input violates a structural precondition (symmetry, finiteness...)."""


class DegenerateInputError(SphereNormError, ValueError):
    """The standardization sphere does not exist for this input.

    Raised for zero-variance slices at eps == 0 and zero weight rows.
    ``index`` names the offending slice when one is known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigurationError(SphereNormError, ValueError):
    pass


class BatchTooSmallError(ConfigurationError):
    pass


class NotApplicableError(SphereNormError):
    """The requested check does not apply to this normalizer."""


class DivergenceError(SphereNormError, FloatingPointError):
    """Training produced non-finite values."""


class KernelCollapse(SphereNormError):
    """A weight row lies in the kernel of the batch covariance.

    The normalized output degenerates to the constant vector ``beta * e_B``,
    which is stored in ``output``.
    """

    def __init__(self, beta, batch_size, rayleigh=0.0):
        super().__init__(
            f"weight row lies in covariance kernel (w S w^T = {rayleigh:.3e}); "
            f"output collapses to beta={beta!r}")
        self.beta = float(beta)
        self.batch_size = int(batch_size)
        self.rayleigh = float(rayleigh)

    @property
    def output(self):
        return np.full(self.batch_size, self.beta)
