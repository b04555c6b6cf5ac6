"""Error types shared across the package.

The CLI maps these onto process exit codes, so library code should raise the
most specific class that applies.
"""


class NestorError(Exception):
    """Base class for all package errors."""


class InvalidInputError(NestorError, ValueError):
    """Malformed user input: bad shapes, non-positive weights, unreadable files."""


class ConfigurationError(InvalidInputError):
    """A configuration value is outside its admissible range."""


class DegeneracyError(NestorError, ArithmeticError):
    """A numerical degeneracy that invalidates the current computation.

    Examples: perfectly collinear latent columns, a singular weight Laplacian,
    an initialization score with zero variance.
    """


class TemperingError(DegeneracyError):
    """The tempered weight update overflows the representable log range.

    Raised with a hint to lower the tempering exponent.
    """


class SamplerError(DegeneracyError):
    """The spanning tree rejection sampler could not produce valid draws."""
