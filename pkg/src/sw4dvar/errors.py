"""Exception types shared across the package."""


class Sw4dvarError(Exception):
    """Base class for package-specific failures."""


class DivergenceError(Sw4dvarError):
    """A model run or an optimisation left the trusted numerical regime."""


class PcgBreakdownError(Sw4dvarError):
    """Conjugate gradients met non-positive curvature; operator not SPD."""


class SparsityError(Sw4dvarError):
    """A Jacobian factor filled outside its certified stencil band."""


class ConfigError(Sw4dvarError):
    """An experiment configuration failed validation."""
