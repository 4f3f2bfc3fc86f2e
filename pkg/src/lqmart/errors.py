"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by the package."""


class NonRefining(LabError):
    """A level is not a partition of the samples or does not refine its predecessor."""


class BadProbabilities(LabError):
    """Sample probabilities are not strictly positive or do not sum to one."""


class LevelOutOfRange(LabError):
    """A filtration level outside ``-1 .. n_levels - 1`` was requested."""


class BadExponent(LabError):
    """An exponent lies outside the admissible range of the operation."""


class ShapeMismatch(LabError):
    """Arrays that must agree in shape do not."""


class NotAdapted(LabError):
    """A sequence entry is not constant on the atoms of its level."""


class SolverDiverged(LabError):
    """An iterative solver failed to improve on its starting objective."""


class EvenIndexNonzero(LabError):
    """An odd-index sequence carries a nonzero even-index entry."""


class ZeroVector(LabError):
    """A nonzero vector was required."""


class ZeroInput(LabError):
    """A nonzero sequence was required."""


class DimensionCap(LabError):
    """The problem exceeds the configured dimension cap."""


class NegativeEntry(LabError):
    """A nonnegative sequence was required."""


class ProductTooLarge(LabError):
    """The decoupling product space would exceed its size cap."""


class BadRate(LabError):
    """A jump rate or intensity is negative or not finite."""


class IntensityNotPredictable(LabError):
    """An intensity depends on information not available at the cell start."""


class NotPredictable(LabError):
    """An integrand depends on information not available at the cell start."""


class MassExceedsOne(LabError):
    """Total compensator mass of a path exceeds one in two-sided mode."""


class AtomInTime(LabError):
    """A compensator carries mass on a degenerate time interval."""


class LipschitzViolated(LabError):
    """A path functional grows faster than its declared Lipschitz constant."""


class ConfigInvalid(LabError):
    """An experiment or bundle configuration failed validation."""


class UnannotatedIncrement(LabError):
    """An increment of an increasing path carries no source annotation."""


class NotConditionallyCentered(LabError):
    """An accessible jump has nonzero conditional mean."""


class HashMismatch(LabError):
    """A baseline was recorded under a different configuration."""


class AssertionFailed(LabError):
    """An acceptance assertion of an experiment did not hold."""
