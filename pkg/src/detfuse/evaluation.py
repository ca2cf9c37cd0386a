"""VOC-protocol matching, average precision, bounds and error analysis.

Matching is greedy in score order: a detection matches the unmatched
non-difficult ground-truth object of maximum IoU when that IoU exceeds
the threshold; detections whose only above-threshold overlap is with a
difficult object are ignored (neither TP nor FP). Two AP protocols are
supported: the interpolated area under the precision envelope over all
recall points, and the legacy 11-point mean of max precision at recalls
0, 0.1, ..., 1.0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import Detection, GroundTruthObject, iou
from .errors import DataError

ALL_POINTS = "all-points"
VOC07_11POINT = "voc07-11point"
PROTOCOLS = (ALL_POINTS, VOC07_11POINT)

IOU_THRESHOLD = 0.5

TP = "tp"
FP = "fp"
IGNORED = "ignored"

FP_TYPES = ("loc", "sim", "oth", "bg")


def detection_sort_key(det: Detection, score: float):
    """Deterministic, permutation-invariant ordering: score desc, then
    intrinsic detection identity."""
    b = det.box
    return (-score, det.image_id, det.detector_id, b.x_min, b.y_min, b.x_max, b.y_max,
            -det.raw_score)


@dataclass
class MatchEntry:
    detection: Detection
    score: float
    kind: str  # tp | fp | ignored
    gt_index: int | None  # index into the gts list passed to match()
    overlap: float  # max IoU against any same-class GT of the image


@dataclass
class MatchResult:
    entries: list[MatchEntry]
    n_positive: int  # non-difficult GT count

    def flags(self) -> list[str]:
        return [e.kind for e in self.entries if e.kind != IGNORED]


def match(
    scored: list[tuple[Detection, float]],
    gts: list[GroundTruthObject],
    iou_threshold: float = IOU_THRESHOLD,
) -> MatchResult:
    """Match one class's detections against one class's ground truth.

    ``scored`` and ``gts`` may span many images; grouping is internal.
    Detections are processed in descending score order (deterministic
    tie-break), each non-difficult GT is matched at most once.
    """
    order = sorted(range(len(scored)), key=lambda i: detection_sort_key(*scored[i]))
    gt_by_image: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        gt_by_image.setdefault(g.image_id, []).append(gi)
    taken = [False] * len(gts)
    entries: list[MatchEntry] = []
    for i in order:
        det, score = scored[i]
        best_open, best_open_ov = None, 0.0
        best_difficult_ov = 0.0
        max_ov = 0.0
        for gi in gt_by_image.get(det.image_id, []):
            g = gts[gi]
            ov = iou(det.box, g.box)
            max_ov = max(max_ov, ov)
            if g.difficult:
                best_difficult_ov = max(best_difficult_ov, ov)
            elif not taken[gi] and ov > best_open_ov:
                best_open, best_open_ov = gi, ov
        if best_open is not None and best_open_ov > iou_threshold:
            taken[best_open] = True
            entries.append(MatchEntry(det, score, TP, best_open, max_ov))
        elif best_difficult_ov > iou_threshold:
            entries.append(MatchEntry(det, score, IGNORED, None, max_ov))
        else:
            entries.append(MatchEntry(det, score, FP, None, max_ov))
    n_positive = sum(1 for g in gts if not g.difficult)
    return MatchResult(entries, n_positive)


# --- average precision ----------------------------------------------------

RECALL_THRESHOLDS_11 = tuple(i / 10 for i in range(11))


def ap_from_flags(flags: list[str], n_positive: int, protocol: str) -> float | None:
    """AP of a ranked tp/fp sequence; None when the class has no GT."""
    if protocol not in PROTOCOLS:
        raise DataError(f"unknown AP protocol {protocol!r}")
    if n_positive == 0:
        return None
    tp = np.cumsum([1.0 if f == TP else 0.0 for f in flags])
    fp = np.cumsum([1.0 if f == FP else 0.0 for f in flags])
    if tp.size == 0:
        return 0.0
    recall = tp / n_positive
    precision = tp / (tp + fp)
    if protocol == VOC07_11POINT:
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        total = 0.0
        for r in RECALL_THRESHOLDS_11:
            mask = recall >= r
            total += float(envelope[mask][0]) if mask.any() else 0.0
        return total / 11.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def average_precision(result: MatchResult, protocol: str = ALL_POINTS) -> float | None:
    return ap_from_flags(result.flags(), result.n_positive, protocol)


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    ap: float | None
    protocol: str


def pr_curve(result: MatchResult, protocol: str = ALL_POINTS) -> PRCurve:
    flags = result.flags()
    tp = np.cumsum([1.0 if f == TP else 0.0 for f in flags])
    fp = np.cumsum([1.0 if f == FP else 0.0 for f in flags])
    n = max(result.n_positive, 1)
    with np.errstate(invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
    return PRCurve(tp / n, precision, ap_from_flags(flags, result.n_positive, protocol), protocol)


def mean_ap(per_class_ap: dict[int, float | None]) -> float | None:
    values = [v for v in per_class_ap.values() if v is not None]
    if not values:
        return None
    return float(np.mean(values))


# --- maximal AP bound -----------------------------------------------------


def _max_bipartite(adjacency: list[list[int]], n_right: int) -> int:
    """Maximum matching size via augmenting paths."""
    match_right = [-1] * n_right

    def augment(u: int, seen: list[bool]) -> bool:
        for v in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                if match_right[v] == -1 or augment(match_right[v], seen):
                    match_right[v] = u
                    return True
        return False

    count = 0
    for u in range(len(adjacency)):
        if augment(u, [False] * n_right):
            count += 1
    return count


def _greedy_matching(pairs: list[tuple[float, int, int]], n_left: int, n_right: int) -> int:
    used_l, used_r = [False] * n_left, [False] * n_right
    count = 0
    for _, li, ri in sorted(pairs, key=lambda p: (-p[0], p[1], p[2])):
        if not used_l[li] and not used_r[ri]:
            used_l[li] = used_r[ri] = True
            count += 1
    return count


def matchable_count(
    dets: list[Detection],
    gts: list[GroundTruthObject],
    iou_threshold: float = IOU_THRESHOLD,
    matching: str = "exact",
) -> int:
    """Size of the largest detection set matchable one-to-one to GT."""
    by_image_d: dict[str, list[int]] = {}
    for i, d in enumerate(dets):
        by_image_d.setdefault(d.image_id, []).append(i)
    by_image_g: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        if not g.difficult:
            by_image_g.setdefault(g.image_id, []).append(i)
    total = 0
    for image_id, dids in by_image_d.items():
        gids = by_image_g.get(image_id, [])
        if not gids:
            continue
        if matching == "exact":
            adjacency = []
            for di in dids:
                adjacency.append(
                    [k for k, gi in enumerate(gids) if iou(dets[di].box, gts[gi].box) > iou_threshold]
                )
            total += _max_bipartite(adjacency, len(gids))
        elif matching == "greedy":
            pairs = []
            for a, di in enumerate(dids):
                for b, gi in enumerate(gids):
                    ov = iou(dets[di].box, gts[gi].box)
                    if ov > iou_threshold:
                        pairs.append((ov, a, b))
            total += _greedy_matching(pairs, len(dids), len(gids))
        else:
            raise DataError(f"unknown matching mode {matching!r}")
    return total


def maximal_ap(
    dets: list[Detection],
    gts: list[GroundTruthObject],
    protocol: str = ALL_POINTS,
    iou_threshold: float = IOU_THRESHOLD,
    matching: str = "exact",
) -> float | None:
    """AP of the ideal ranking: every matchable detection first.

    The matchable set is the maximum bipartite matching per image, so no
    re-ranking of the same detections can exceed this value.
    """
    n_positive = sum(1 for g in gts if not g.difficult)
    if n_positive == 0:
        return None
    m = matchable_count(dets, gts, iou_threshold, matching)
    # Unmatched detections become FP unless their only above-threshold
    # overlap is a difficult object; tail order cannot affect the AP.
    gt_by_image: dict[str, list[GroundTruthObject]] = {}
    for g in gts:
        gt_by_image.setdefault(g.image_id, []).append(g)
    n_ignored = 0
    for d in dets:
        cands = gt_by_image.get(d.image_id, [])
        best_diff = max((iou(d.box, g.box) for g in cands if g.difficult), default=0.0)
        best_plain = max((iou(d.box, g.box) for g in cands if not g.difficult), default=0.0)
        if best_diff > iou_threshold and best_plain <= iou_threshold:
            n_ignored += 1
    n_fp = len(dets) - m - n_ignored
    flags = [TP] * m + [FP] * max(n_fp, 0)
    return ap_from_flags(flags, n_positive, protocol)


# --- false-positive taxonomy ----------------------------------------------


@dataclass
class SimilarityGroups:
    """class_id -> group label; classes sharing a label are 'similar'."""

    group_of: dict[int, str]

    @classmethod
    def from_names(cls, mapping: dict[str, str], class_names: tuple[str, ...]) -> "SimilarityGroups":
        group_of = {}
        for name, group in mapping.items():
            if name not in class_names:
                raise DataError(f"unknown class {name!r} in similarity groups")
            group_of[class_names.index(name)] = group
        for cid, name in enumerate(class_names):
            group_of.setdefault(cid, f"__self_{name}")
        return cls(group_of)

    @classmethod
    def singletons(cls, n_classes: int) -> "SimilarityGroups":
        return cls({c: f"__self_{c}" for c in range(n_classes)})


@dataclass
class TaxonomyBucket:
    n_fp: int
    fractions: dict[str, float]


@dataclass
class TaxonomyReport:
    fp_types: list[str] = field(default_factory=list)  # per FP, rank order
    buckets: list[TaxonomyBucket] = field(default_factory=list)


def classify_fp(
    entry: MatchEntry,
    gts_by_image: dict[str, list[GroundTruthObject]],
    groups: SimilarityGroups,
) -> str:
    """Loc / Sim / Oth / BG for one false positive.

    Loc: mislocalized or duplicate same-class detection (overlap >= 0.1);
    Sim: overlaps an object of a same-group class; Oth: overlaps any
    other class; BG: overlaps nothing.
    """
    det = entry.detection
    if entry.overlap >= 0.1:
        return "loc"
    best_other: dict[int, float] = {}
    for g in gts_by_image.get(det.image_id, []):
        if g.class_id == det.class_id:
            continue
        ov = iou(det.box, g.box)
        if ov >= 0.1:
            best_other[g.class_id] = max(best_other.get(g.class_id, 0.0), ov)
    if best_other:
        own_group = groups.group_of.get(det.class_id)
        if own_group is None:
            raise DataError(f"class {det.class_id} missing from similarity groups")
        for cid in best_other:
            if cid not in groups.group_of:
                raise DataError(f"class {cid} missing from similarity groups")
        if any(groups.group_of[cid] == own_group for cid in best_other):
            return "sim"
        return "oth"
    return "bg"


def fp_taxonomy(
    results: dict[int, MatchResult],
    gts: list[GroundTruthObject],
    groups: SimilarityGroups,
    bucket_sizes: list[int] | None = None,
) -> TaxonomyReport:
    """Cumulative FP-type fractions at increasing false-positive counts.

    False positives from all classes are pooled in descending final-score
    order; each bucket reports the type mix of the first N of them.
    """
    gts_by_image: dict[str, list[GroundTruthObject]] = {}
    for g in gts:
        gts_by_image.setdefault(g.image_id, []).append(g)
    fps: list[MatchEntry] = []
    for result in results.values():
        fps.extend(e for e in result.entries if e.kind == FP)
    fps.sort(key=lambda e: detection_sort_key(e.detection, e.score))
    types = [classify_fp(e, gts_by_image, groups) for e in fps]
    report = TaxonomyReport(fp_types=types)
    total = len(types)
    if total == 0:
        return report
    if bucket_sizes is None:
        bucket_sizes = sorted({max(1, round(total * k / 8)) for k in range(1, 9)})
    for n in bucket_sizes:
        n = min(n, total)
        head = types[:n]
        report.buckets.append(
            TaxonomyBucket(n, {t: head.count(t) / n for t in FP_TYPES})
        )
    return report


# --- feature importance ----------------------------------------------------


def feature_importance(models: list) -> np.ndarray:
    """Mean absolute weight per feature dimension across class models."""
    if not models:
        raise DataError("feature importance needs at least one model")
    dim = models[0].dim
    for m in models:
        if m.dim != dim:
            raise DataError("models disagree on feature dimension")
    return np.mean([np.abs(m.weights) for m in models], axis=0)


# --- report writers ---------------------------------------------------------


def write_ap_report(
    text_path: str,
    csv_path: str,
    class_names: tuple[str, ...],
    ap_all: dict[int, float | None],
    ap_11: dict[int, float | None],
) -> None:
    """Per-class AP table under both protocols, text and CSV."""
    width = max(len(n) for n in class_names) if class_names else 5
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(f"{'class':<{width}}  {ALL_POINTS:>12}  {VOC07_11POINT:>14}\n")
        for cid, name in enumerate(class_names):
            a = ap_all.get(cid)
            b = ap_11.get(cid)
            fh.write(
                f"{name:<{width}}  "
                f"{'-' if a is None else format(a, '.6f'):>12}  "
                f"{'-' if b is None else format(b, '.6f'):>14}\n"
            )
        ma, mb = mean_ap(ap_all), mean_ap(ap_11)
        fh.write(
            f"{'mAP':<{width}}  "
            f"{'-' if ma is None else format(ma, '.6f'):>12}  "
            f"{'-' if mb is None else format(mb, '.6f'):>14}\n"
        )
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "ap_all_points", "ap_voc07_11point"])
        for cid, name in enumerate(class_names):
            a, b = ap_all.get(cid), ap_11.get(cid)
            writer.writerow([name, "" if a is None else f"{a:.6f}", "" if b is None else f"{b:.6f}"])
        ma, mb = mean_ap(ap_all), mean_ap(ap_11)
        writer.writerow(["mAP", "" if ma is None else f"{ma:.6f}", "" if mb is None else f"{mb:.6f}"])


def write_pr_csv(path: str, curves: dict[str, PRCurve]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "recall", "precision"])
        for name in sorted(curves):
            curve = curves[name]
            for r, p in zip(curve.recalls.tolist(), curve.precisions.tolist()):
                writer.writerow([name, f"{r:.6f}", f"{p:.6f}"])


def write_taxonomy_csv(path: str, report: TaxonomyReport) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_fp"] + [f"frac_{t}" for t in FP_TYPES])
        for bucket in report.buckets:
            writer.writerow(
                [bucket.n_fp] + [f"{bucket.fractions[t]:.6f}" for t in FP_TYPES]
            )


def write_importance_csv(path: str, names: list[str], values: np.ndarray) -> None:
    if len(names) != values.shape[0]:
        raise DataError("feature name count does not match importance vector")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "mean_abs_weight"])
        for name, v in zip(names, values.tolist()):
            writer.writerow([name, f"{v:.6f}"])
