"""Exception hierarchy shared across the package."""


class LamiError(Exception):
    """Base class for all package errors."""


class ConceptError(LamiError):
    """Dictionary construction, merging, or persistence failed."""


class DescriptionError(LamiError):
    """Description generation or caching failed."""

    def __init__(self, message: str, failed_ids: list[int] | None = None):
        super().__init__(message)
        self.failed_ids = failed_ids or []


class EmbeddingError(LamiError):
    """Embedding provider or container error."""


class ClusterError(LamiError):
    """Clustering fit or query error."""


class SamplerError(LamiError):
    """Frequency computation or federated sampling error."""


class DetectorError(LamiError):
    """Detector forward/loss contract violation."""


class InferenceError(LamiError):
    """Inference pipeline error."""


class DatasetError(LamiError):
    """Synthetic dataset specification or rendering error."""


class ConfigError(LamiError):
    """Invalid or missing configuration."""
