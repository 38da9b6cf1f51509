"""trackletlab: embedding-space re-identification analytics.

Open-set cross-encounter retrieval, tracklet aggregation, attribution
faithfulness curves, cannot-link constrained clustering for population
counting, and multi-object tracking with a full MOT metric suite. Everything
operates on precomputed embeddings and detections supplied as files.
"""

__version__ = "0.1.0"

from . import aggregation, clustering, datamodel, explain, retrieval, synth, tracking

__all__ = [
    "__version__",
    "aggregation",
    "clustering",
    "datamodel",
    "explain",
    "retrieval",
    "synth",
    "tracking",
]
