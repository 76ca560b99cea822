class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class GeometryError(ValueError):
    """Tensor shapes do not match the configured image/patch geometry."""


class LengthError(ValueError):
    """Token sequence longer than the text backbone allows."""


class ChecksumError(RuntimeError):
    """Checkpoint payload does not match the checksum in its manifest."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good state was written before raising."""
