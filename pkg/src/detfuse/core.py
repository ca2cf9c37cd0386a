"""Core geometric and detection types plus overlap computations.

Everything here is pure and immutable: boxes, detections, ground-truth
objects, IoU/coverage overlaps, and the per-detector maximum-overlap
correspondence used throughout feature extraction and suppression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DataError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, strictly positive area."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise DataError(f"box coordinates must be finite, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box (zero or negative area): {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def intersection_area(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0.0 or h <= 0.0:
            return 0.0
        return w * h


@dataclass(frozen=True)
class Detection:
    """One detector output: a scored box for a class in an image.

    ``calibrated_score`` is absent until score calibration has been
    applied; when present it must lie strictly inside (0, 1).
    """

    image_id: str
    class_id: int
    detector_id: int
    box: BoundingBox
    raw_score: float
    calibrated_score: float | None = None

    def __post_init__(self) -> None:
        if self.calibrated_score is not None and not (0.0 < self.calibrated_score < 1.0):
            raise DataError(
                f"calibrated score must be strictly inside (0,1), got {self.calibrated_score}"
            )


@dataclass(frozen=True)
class GroundTruthObject:
    """Annotated object; ``difficult`` objects are excluded from scoring."""

    image_id: str
    class_id: int
    box: BoundingBox
    difficult: bool = False


@dataclass(frozen=True)
class Correspondence:
    """Per-detector maximum-overlap partner of one detection.

    ``gammas[j]`` is the largest IoU between the detection and any
    detection of detector ``j`` (0.0 when detector ``j`` has no
    overlapping detection); ``partners[j]`` is the index of that
    detection in the list the correspondence was computed from, or
    ``None`` exactly when ``gammas[j]`` is 0.
    """

    gammas: tuple[float, ...]
    partners: tuple[int | None, ...]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 when disjoint.

    The union is clamped to at least each single area (a mathematical
    no-op) so that iou <= coverage holds exactly in floating point even
    when one box contains the other.
    """
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    area_a, area_b = a.area, b.area
    return inter / max(area_a + area_b - inter, area_a, area_b)


def coverage(candidate: BoundingBox, dominator: BoundingBox) -> float:
    """Fraction of ``candidate``'s area covered by ``dominator``."""
    return candidate.intersection_area(dominator) / candidate.area


def correspondences(
    det: Detection, dets: list[Detection], n_detectors: int
) -> Correspondence:
    """Maximum-overlap detection of each detector for ``det``.

    ``dets`` must be the detections of the same image and class as
    ``det`` (including ``det`` itself, whose own detector then trivially
    yields gamma 1). Ties in the argmax are broken by higher raw score,
    then by lower index in ``dets``.
    """
    gammas = [0.0] * n_detectors
    partners: list[int | None] = [None] * n_detectors
    best_raw = [-math.inf] * n_detectors
    for idx, other in enumerate(dets):
        j = other.detector_id
        g = iou(det.box, other.box)
        if g == 0.0:
            continue
        if g > gammas[j] or (g == gammas[j] and other.raw_score > best_raw[j]):
            gammas[j] = g
            partners[j] = idx
            best_raw[j] = other.raw_score
    return Correspondence(tuple(gammas), tuple(partners))
