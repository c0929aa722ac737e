"""Open-vocabulary toy detection with language-model-instructed concept sampling.

The package is organized around one pipeline:

  concepts      -> build and persist the open-set category dictionary
  descriptions  -> per-category visual descriptions from an LLM client (cached)
  embeddings    -> semantic-space and classifier-space text embeddings
  clustering    -> k-means grouping of visually similar categories
  sampler       -> federated category sampling with cluster exclusion
  detector      -> miniature DETR-style detector with a frozen backbone
  inference     -> region pooling, VLM scoring, score calibration
  toydata / metrics / training -> synthetic dataset, evaluation, train loop
"""

from lami.errors import (
    LamiError,
    ConceptError,
    DescriptionError,
    EmbeddingError,
    ClusterError,
    SamplerError,
    DetectorError,
    InferenceError,
    DatasetError,
    ConfigError,
)

__version__ = "0.1.0"

__all__ = [
    "LamiError",
    "ConceptError",
    "DescriptionError",
    "EmbeddingError",
    "ClusterError",
    "SamplerError",
    "DetectorError",
    "InferenceError",
    "DatasetError",
    "ConfigError",
]
