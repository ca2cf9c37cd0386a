"""Merging detector outputs into one re-ranked detection list.

Three calibration-only baselines (union by calibrated score, round-robin
interleave, best-detector-first) and the learned re-ranking that scores
every detection with its class's ranking model. All modes finish with
cross-detector non-maximum suppression restricted to the maximum-overlap
correspondence graph: a kept detection suppresses only detections it
corresponds with, and only when they are sufficiently covered by it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .calibration import CalibrationTable, apply_platt, clip_unit_open
from .core import Detection, correspondences, coverage, iou
from .corpus import DetectionCorpus, ProposalSet, Rosters
from .errors import DataError
from .evaluation import detection_sort_key
from .features import FeatureOptions, corpus_features
from .rankers import RankerModel, score_matrix

NAIVE_MODES = ("naive-i", "naive-ii", "naive-iii")


@dataclass(frozen=True)
class NmsOptions:
    coverage_threshold: float = 0.4
    metric: str = "coverage"          # "coverage" or "iou"
    correspondence_only: bool = True  # False = classic all-pairs NMS


@dataclass
class RankedDetection:
    detection: Detection
    final_score: float
    suppressed: bool = False


@dataclass
class RankedList:
    """Per-class descending ranking with suppression flags."""

    rosters: Rosters
    entries: list[RankedDetection] = field(default_factory=list)

    def sort(self) -> None:
        self.entries.sort(
            key=lambda e: (e.detection.class_id, *detection_sort_key(e.detection, e.final_score))
        )

    def kept(self) -> list[RankedDetection]:
        return [e for e in self.entries if not e.suppressed]

    def scored_for_class(self, class_id: int) -> list[tuple[Detection, float]]:
        return [
            (e.detection, e.final_score)
            for e in self.entries
            if not e.suppressed and e.detection.class_id == class_id
        ]

    def kept_detections_for_class(self, class_id: int) -> list[Detection]:
        return [d for d, _ in self.scored_for_class(class_id)]


def apply_calibration(corpus: DetectionCorpus, table: CalibrationTable) -> DetectionCorpus:
    """Corpus copy with calibrated scores attached to every detection."""
    rosters = corpus.rosters
    out = DetectionCorpus(rosters)
    for image_id, dets in corpus.by_image.items():
        out.by_image[image_id] = [
            replace(
                d,
                calibrated_score=clip_unit_open(
                    apply_platt(
                        table.get(rosters.detectors[d.detector_id], rosters.classes[d.class_id]),
                        d.raw_score,
                    )
                ),
            )
            for d in dets
        ]
    return out


def cross_nms(
    scored: list[tuple[Detection, float]],
    options: NmsOptions | None = None,
) -> list[bool]:
    """Suppression flags for one image/class group of scored detections.

    Sweeps in descending final score: each unsuppressed detection is
    kept and suppresses its unsuppressed correspondence partners whose
    coverage by the kept box reaches the threshold.
    """
    options = options or NmsOptions()
    n = len(scored)
    if n == 0:
        return []
    dets = [d for d, _ in scored]
    n_detectors = max(d.detector_id for d in dets) + 1
    neighbors: list[set[int]] = [set() for _ in range(n)]
    if options.correspondence_only:
        for i, d in enumerate(dets):
            corr = correspondences(d, dets, n_detectors)
            for partner in corr.partners:
                if partner is not None and partner != i:
                    neighbors[i].add(partner)
                    neighbors[partner].add(i)
    else:
        for i in range(n):
            neighbors[i] = set(range(n)) - {i}
    order = sorted(range(n), key=lambda i: detection_sort_key(dets[i], scored[i][1]))
    suppressed = [False] * n
    kept = [False] * n
    for i in order:
        if suppressed[i]:
            continue
        kept[i] = True
        for j in neighbors[i]:
            if kept[j] or suppressed[j]:
                continue
            if options.metric == "coverage":
                covered = coverage(dets[j].box, dets[i].box)
            elif options.metric == "iou":
                covered = iou(dets[j].box, dets[i].box)
            else:
                raise DataError(f"unknown NMS metric {options.metric!r}")
            if covered >= options.coverage_threshold:
                suppressed[j] = True
    return suppressed


def _apply_nms(ranked: RankedList, options: NmsOptions | None) -> RankedList:
    groups: dict[tuple[str, int], list[RankedDetection]] = {}
    for e in ranked.entries:
        groups.setdefault((e.detection.image_id, e.detection.class_id), []).append(e)
    for group in groups.values():
        flags = cross_nms([(e.detection, e.final_score) for e in group], options)
        for e, flag in zip(group, flags):
            e.suppressed = flag
    ranked.sort()
    return ranked


def _require_calibrated(corpus: DetectionCorpus) -> None:
    for dets in corpus.by_image.values():
        for d in dets:
            if d.calibrated_score is None:
                raise DataError(
                    "naive merging requires calibrated scores; run calibration first"
                )


def _rank_score(position: int, total: int) -> float:
    return 1.0 - position / total


def naive_merge(
    corpus: DetectionCorpus,
    mode: str,
    detector_order: list[int] | None = None,
    nms: NmsOptions | None = None,
) -> RankedList:
    """Merge calibrated detections without learning.

    naive-i: one list sorted by calibrated score. naive-ii: round-robin
    over the per-detector rankings, scored by 1 - rank/total. naive-iii:
    detectors concatenated best-first (``detector_order``), same
    synthetic rank scores. NMS runs after merging in every mode.
    """
    if mode not in NAIVE_MODES:
        raise DataError(f"unknown naive mode {mode!r}")
    _require_calibrated(corpus)
    rosters = corpus.rosters
    ranked = RankedList(rosters)
    for class_id in range(rosters.n_classes):
        class_dets = [
            d for img in sorted(corpus.by_image) for d in corpus.by_image[img]
            if d.class_id == class_id
        ]
        if not class_dets:
            continue
        if mode == "naive-i":
            ranked.entries.extend(
                RankedDetection(d, d.calibrated_score) for d in class_dets
            )
            continue
        per_detector: dict[int, list[Detection]] = {j: [] for j in range(rosters.n_detectors)}
        for d in class_dets:
            per_detector[d.detector_id].append(d)
        for j in per_detector:
            per_detector[j].sort(key=lambda d: detection_sort_key(d, d.calibrated_score))
        if mode == "naive-ii":
            queue = [per_detector[j] for j in range(rosters.n_detectors)]
            merged: list[Detection] = []
            cursors = [0] * len(queue)
            while any(cursors[k] < len(queue[k]) for k in range(len(queue))):
                for k in range(len(queue)):
                    if cursors[k] < len(queue[k]):
                        merged.append(queue[k][cursors[k]])
                        cursors[k] += 1
        else:
            if detector_order is None:
                raise DataError("naive-iii requires a detector order")
            if sorted(detector_order) != list(range(rosters.n_detectors)):
                raise DataError("detector order must be a permutation of all detector ids")
            merged = [d for j in detector_order for d in per_detector[j]]
        total = len(merged)
        ranked.entries.extend(
            RankedDetection(d, _rank_score(pos, total)) for pos, d in enumerate(merged)
        )
    return _apply_nms(ranked, nms)


def rerank(
    corpus: DetectionCorpus,
    models: dict[int, RankerModel],
    features: dict[str, "object"],
    nms: NmsOptions | None = None,
) -> RankedList:
    """Score every detection with its class model, sort, then NMS."""
    ranked = RankedList(corpus.rosters)
    for image_id, dets in corpus.by_image.items():
        matrix = features.get(image_id)
        if matrix is None or matrix.shape[0] != len(dets):
            raise DataError(f"features missing or misaligned for image {image_id}")
        for class_id in {d.class_id for d in dets}:
            if class_id not in models:
                raise DataError(
                    f"no ranking model for class {corpus.rosters.classes[class_id]!r}"
                )
        for idx, d in enumerate(dets):
            model = models[d.class_id]
            final = float(score_matrix(model, matrix[idx : idx + 1])[0])
            ranked.entries.append(RankedDetection(d, final))
    return _apply_nms(ranked, nms)


def single_detector_rerank(
    corpus: DetectionCorpus,
    detector_name: str,
    models: dict[int, RankerModel],
    proposals: ProposalSet,
    feature_options: FeatureOptions | None = None,
    nms: NmsOptions | None = None,
) -> RankedList:
    """Re-rank one detector's own detections with context features.

    The corpus is restricted to the detector (roster of one, so the
    detector-relative block collapses to indicator + self score + sum)
    and must already carry calibrated scores if the feature options use
    them.
    """
    sub = corpus.restrict_to_detector(detector_name)
    feats = corpus_features(sub, proposals, feature_options)
    return rerank(sub, models, feats, nms)


def ranked_from_scores(corpus: DetectionCorpus, use_calibrated: bool) -> RankedList:
    """Baseline ranking: final score is the raw or calibrated score."""
    ranked = RankedList(corpus.rosters)
    for img in sorted(corpus.by_image):
        for d in corpus.by_image[img]:
            if use_calibrated:
                if d.calibrated_score is None:
                    raise DataError("corpus has no calibrated scores")
                s = d.calibrated_score
            else:
                s = d.raw_score
            ranked.entries.append(RankedDetection(d, s))
    ranked.sort()
    return ranked


# --- ranked list persistence ------------------------------------------------


def write_ranked(path: str, ranked: RankedList, include_suppressed: bool = False) -> None:
    """Detection records with the final score appended.

    With ``include_suppressed`` an extra 0|1 column marks suppression and
    suppressed entries are emitted too.
    """
    rosters = ranked.rosters
    with open(path, "w", encoding="utf-8") as fh:
        for e in ranked.entries:
            if e.suppressed and not include_suppressed:
                continue
            d = e.detection
            fields = [
                d.image_id,
                rosters.classes[d.class_id],
                rosters.detectors[d.detector_id],
                f"{d.box.x_min:.6f}",
                f"{d.box.y_min:.6f}",
                f"{d.box.x_max:.6f}",
                f"{d.box.y_max:.6f}",
                f"{d.raw_score:.6f}",
                f"{e.final_score:.6f}",
            ]
            if include_suppressed:
                fields.append("1" if e.suppressed else "0")
            fh.write("\t".join(fields) + "\n")


def read_ranked(path: str, rosters: Rosters) -> RankedList:
    from .core import BoundingBox  # local to avoid shadowing

    ranked = RankedList(rosters)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (9, 10):
                raise DataError(f"{path}:{lineno}: expected 9 or 10 fields")
            try:
                box = BoundingBox(*(float(t) for t in parts[3:7]))
                det = Detection(
                    parts[0],
                    rosters.class_id(parts[1]),
                    rosters.detector_id(parts[2]),
                    box,
                    float(parts[7]),
                )
                entry = RankedDetection(det, float(parts[8]))
            except (ValueError, DataError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if len(parts) == 10:
                if parts[9] not in ("0", "1"):
                    raise DataError(f"{path}:{lineno}: suppression flag must be 0 or 1")
                entry.suppressed = parts[9] == "1"
            ranked.entries.append(entry)
    ranked.sort()
    return ranked
