"""Exception types shared across the package."""


class RatlesnetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RatlesnetError):
    """An array or tensor has the wrong rank or incompatible extents."""


class NumericError(RatlesnetError):
    """A computation produced NaN or infinity."""


class GraphError(RatlesnetError):
    """The autodiff tape was used incorrectly."""


class FormatError(RatlesnetError):
    """A file or byte stream does not match the expected layout."""


class UnsupportedError(FormatError):
    """A file is well-formed but uses a feature outside the supported subset."""


class LengthError(FormatError):
    """A file's data section is shorter than its header promises."""


class StateError(RatlesnetError):
    """Optimizer state does not line up with the parameters it updates."""


class DegenerateVolumeError(RatlesnetError):
    """A volume has no intensity spread to standardize."""


class LabelError(RatlesnetError):
    """A segmentation mask contains values other than 0 and 1."""


class GenerationError(RatlesnetError):
    """Synthetic data generation could not satisfy its constraints."""


class ConfigError(RatlesnetError):
    """A run configuration is malformed or inconsistent."""
