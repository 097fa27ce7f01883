"""Exception types raised across the package.

Everything derives from :class:`CrystalError`; the validation-style errors
additionally derive from :class:`ValueError` so generic callers can catch
them the usual way.
"""


class CrystalError(Exception):
    """Base class for all errors raised by this package."""


class NearZeroNorm(CrystalError, ValueError):
    """A vector's L2-norm is too close to zero to define a direction."""


class NonPositiveAlpha(CrystalError, ValueError):
    """The hypersphere radius must be strictly positive."""


class DimensionMismatch(CrystalError, ValueError):
    """Array shapes do not chain/agree."""


class LabelOutOfRange(CrystalError, ValueError):
    """A class label falls outside [0, num_classes)."""


class InvalidClassCount(CrystalError, ValueError):
    """Class count outside the domain of the scale-bound formulas."""


class InvalidProbability(CrystalError, ValueError):
    """A probability argument falls outside (0, 1)."""


class NotUnitVector(CrystalError, ValueError):
    """A vector expected on the unit hypersphere is not unit-norm."""


class DivergedLoss(CrystalError, RuntimeError):
    """Training loss became NaN/Inf; carries the iteration index."""

    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"loss diverged (non-finite) at iteration {iteration}")


class InsufficientSamples(CrystalError, ValueError):
    """Not enough samples/classes for the requested statistic."""


class EmptyTemplate(CrystalError, ValueError):
    """A template must contain at least one media item."""


class ProbabilityOutOfRange(CrystalError, ValueError):
    """A detection score is outside the open interval (0, 1)."""


class MissingTemplate(CrystalError, KeyError):
    """A protocol references a template id absent from the dataset."""


class DegenerateLabels(CrystalError, ValueError):
    """An ROC needs at least one match and one nonmatch score."""


class ProbeWithoutMate(CrystalError, ValueError):
    """Closed-set identification requires every probe subject in the gallery."""


class NoNonMatedProbes(CrystalError, ValueError):
    """Open-set identification requires probes without gallery mates."""


class MalformedRow(CrystalError, ValueError):
    """A CSV row failed to parse; the message names the line number."""


class InconsistentDimension(CrystalError, ValueError):
    """Feature dimension disagrees with what the caller expects."""


class MissingColumn(CrystalError, ValueError):
    """A required CSV header column is absent."""


class BadMagic(CrystalError, ValueError):
    """An IDX file does not start with the expected magic number."""


class TruncatedFile(CrystalError, ValueError):
    """An IDX file ends before the declared payload."""


class CountMismatch(CrystalError, ValueError):
    """IDX image and label files declare different item counts."""


class InvalidConfig(CrystalError, ValueError):
    """A config file contains an unknown key or an out-of-range value."""
