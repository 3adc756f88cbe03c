"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or latent dimensions do not match the expected contract."""


class ConfigError(ValueError):
    """An invalid configuration value was supplied."""


class DomainError(ValueError):
    """A numeric argument lies outside the operation's domain."""


class ValidationError(ValueError):
    """Input contains non-finite or otherwise invalid values."""


class DataError(ValueError):
    """The dataset cannot satisfy the request (too few donors, tiny sets...)."""


class DegenerateAttributeError(DataError):
    """Positive and negative latents coincide, so no edit direction exists."""


class IngestionError(IOError):
    """An external image or mask file could not be read."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or diverged."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline prerequisite (checkpoint, pair set, ...) is missing."""
