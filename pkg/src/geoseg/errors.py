"""Exception types shared across the package.

Every error carries a short machine-parsable ``category`` so the CLI can
emit a stable one-line diagnostic and exit nonzero.
"""


class GeoSegError(Exception):
    category = "internal"


class ConfigError(GeoSegError):
    """Invalid configuration value or inconsistent config combination."""

    category = "config"


class ShapeError(GeoSegError):
    """Operand shapes incompatible with the requested operation."""

    category = "shape"


class DataError(GeoSegError):
    """Dataset, manifest, or generator problem."""

    category = "data"


class FileFormatError(GeoSegError):
    """Malformed volume/checkpoint container on disk."""

    category = "io"


class TrainingAbort(GeoSegError):
    """Non-finite loss or gradient; the run cannot continue."""

    category = "training"


class UndefinedMetricError(GeoSegError):
    """Surface metric requested on a mask without a surface."""

    category = "metric"
