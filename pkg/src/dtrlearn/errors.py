"""Exception types shared across the package."""


class DtrError(Exception):
    """Base class for errors raised by this package."""


class SchemaError(DtrError):
    """Dataset schema is malformed or does not match the data file."""


class DataValidationError(DtrError):
    """Data values violate the format contract (parse failures, bad treatment codes)."""


class DegenerateFitError(DtrError):
    """A model fit collapsed (complete separation, single-arm leaf, unsplittable root)."""


class UndefinedEffectError(DtrError):
    """The local neighborhood has no treatment variation, so no effect is identified."""


class EstimationError(DtrError):
    """A step of the backward recursion or an experiment run failed."""
