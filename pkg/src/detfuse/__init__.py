"""detfuse: combine ranked object-detector outputs with contextual
features and learning-to-rank, evaluate under the VOC protocol, and
verify everything on seeded synthetic corpora."""

__version__ = "0.1.0"

from .core import BoundingBox, Correspondence, Detection, GroundTruthObject, coverage, iou

__all__ = [
    "BoundingBox",
    "Correspondence",
    "Detection",
    "GroundTruthObject",
    "coverage",
    "iou",
    "__version__",
]
