"""Contextual feature extraction for detections.

Three blocks per detection:

- rs: detector one-hot, per-detector relative scores (max-overlap IoU
  times the partner's score), all pairwise sums and the total sum.
  Dimension 2n + n(n-1)/2 + 1, i.e. 10 for three detectors.
- os: mean top-k overlap with the OBJ, CORE and EES proposal sets, plus
  the confidence of the best-overlapping EES proposal. Dimension 4.
- so: per class, the sum over detectors of each detector's best score
  for that class in the image. Dimension = number of classes.

With three detectors and twenty classes the full vector has 10+4+20 = 34
components, all non-negative, optionally lifted 34 -> 102 by an explicit
additive chi-squared kernel map.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .core import Detection, correspondences, iou
from .corpus import PROPOSAL_SOURCES, DetectionCorpus, ProposalSet, Rosters
from .errors import DataError

DEFAULT_N_NEIGHBORS = 10
OS_DIM = len(PROPOSAL_SOURCES) + 1

# Sampling period of the kernel map, chosen empirically: inner products of
# mapped dense vectors stay within ~3.5% of the exact additive chi-squared
# kernel at this value.
KERNEL_MAP_PERIOD = 0.6


def rs_dim(n_detectors: int) -> int:
    return 2 * n_detectors + n_detectors * (n_detectors - 1) // 2 + 1


def feature_dim(n_detectors: int, n_classes: int, kernel_map: bool = False) -> int:
    d = rs_dim(n_detectors) + OS_DIM + n_classes
    return 3 * d if kernel_map else d


def detection_score(det: Detection, use_calibrated: bool = True) -> float:
    if not use_calibrated:
        return det.raw_score
    if det.calibrated_score is None:
        raise DataError(f"detection in image {det.image_id} has no calibrated score")
    return det.calibrated_score


@dataclass(frozen=True)
class ContextFeatureVector:
    rs: np.ndarray
    os: np.ndarray
    so: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rs, self.os, self.so])


def relative_scores(
    det: Detection,
    image_dets: list[Detection],
    n_detectors: int,
    use_calibrated: bool = True,
) -> np.ndarray:
    """Per detector, max-overlap IoU times the partner detection's score.

    ``image_dets`` must contain the same-image, same-class detections
    (including ``det``); detectors with no overlapping detection get 0.
    """
    corr = correspondences(det, image_dets, n_detectors)
    out = np.zeros(n_detectors)
    for j in range(n_detectors):
        partner = corr.partners[j]
        if partner is not None:
            out[j] = corr.gammas[j] * detection_score(image_dets[partner], use_calibrated)
    return out


def assemble_rs(det: Detection, rel: np.ndarray) -> np.ndarray:
    """[one-hot detector | relative scores | pairwise sums | total]."""
    n = rel.shape[0]
    indicator = np.zeros(n)
    indicator[det.detector_id] = 1.0
    pair_sums = np.array([rel[i] + rel[j] for i, j in combinations(range(n), 2)])
    return np.concatenate([indicator, rel, pair_sums, [rel.sum()]])


def object_saliency(
    det: Detection,
    proposals: dict[str, list],
    n_neighbors: int = DEFAULT_N_NEIGHBORS,
) -> np.ndarray:
    """Mean top-k proposal overlap per source, plus best-EES confidence.

    Sources with fewer than ``n_neighbors`` proposals count the missing
    entries as zero overlap. The last component is the confidence of the
    maximum-overlap EES proposal, or 0 when no EES proposal overlaps.
    """
    if n_neighbors < 1:
        raise DataError("n_neighbors must be >= 1")
    out = np.zeros(OS_DIM)
    for si, source in enumerate(PROPOSAL_SOURCES):
        recs = proposals.get(source, [])
        if not recs:
            continue
        overlaps = np.array([iou(det.box, r.box) for r in recs])
        top = np.sort(overlaps)[::-1][:n_neighbors]
        out[si] = top.sum() / n_neighbors
        if source == "EES":
            best = int(np.lexsort((-np.array([r.confidence for r in recs]), -overlaps))[0])
            if overlaps[best] > 0.0:
                out[OS_DIM - 1] = recs[best].confidence
    return out


def object_object_context(
    image_dets: list[Detection],
    n_detectors: int,
    n_classes: int,
    use_calibrated: bool = True,
) -> np.ndarray:
    """Per class, sum over detectors of their best score in this image.

    ``image_dets`` is the full detection list of one image (all classes);
    the result is shared by every detection of that image.
    """
    best = np.zeros((n_detectors, n_classes))
    for d in image_dets:
        s = detection_score(d, use_calibrated)
        if s > best[d.detector_id, d.class_id]:
            best[d.detector_id, d.class_id] = s
    return best.sum(axis=0)


def feature_map(v: np.ndarray) -> np.ndarray:
    """Order-1 explicit map approximating the additive chi-squared kernel.

    Each non-negative component x expands into three components
    (sqrt(xL), sqrt(2xL sech(pi L)) cos(L log x), ... sin(L log x)) with
    sampling period L; zeros map to zeros, so the origin is fixed.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise DataError("kernel map requires non-negative components")
    L = KERNEL_MAP_PERIOD
    flat = v.reshape(-1)
    out = np.zeros((flat.size, 3))
    nz = flat > 0
    x = flat[nz]
    out[nz, 0] = np.sqrt(x * L)
    radius = np.sqrt(2.0 * x * L / np.cosh(np.pi * L))
    angle = L * np.log(x)
    out[nz, 1] = radius * np.cos(angle)
    out[nz, 2] = radius * np.sin(angle)
    return out.reshape(v.shape[:-1] + (3 * v.shape[-1],)) if v.ndim > 1 else out.reshape(-1)


@dataclass(frozen=True)
class FeatureOptions:
    n_neighbors: int = DEFAULT_N_NEIGHBORS
    use_calibrated: bool = True
    kernel_map: bool = False


def feature_names(rosters: Rosters, options: FeatureOptions | None = None) -> list[str]:
    options = options or FeatureOptions()
    names = [f"ind_{d}" for d in rosters.detectors]
    names += [f"rel_{d}" for d in rosters.detectors]
    names += [
        f"relsum_{rosters.detectors[i]}_{rosters.detectors[j]}"
        for i, j in combinations(range(rosters.n_detectors), 2)
    ]
    names.append("relsum_total")
    names += [f"sal_{s.lower()}" for s in PROPOSAL_SOURCES] + ["sal_ees_conf"]
    names += [f"ctx_{c}" for c in rosters.classes]
    if options.kernel_map:
        names = [f"{n}_m{k}" for n in names for k in range(3)]
    return names


def image_features(
    image_dets: list[Detection],
    proposals: dict[str, list],
    rosters: Rosters,
    options: FeatureOptions | None = None,
) -> np.ndarray:
    """Feature matrix for one image, rows aligned with ``image_dets``."""
    options = options or FeatureOptions()
    n, c = rosters.n_detectors, rosters.n_classes
    so = object_object_context(image_dets, n, c, options.use_calibrated)
    by_class: dict[int, list[Detection]] = {}
    for d in image_dets:
        by_class.setdefault(d.class_id, []).append(d)
    rows = np.zeros((len(image_dets), feature_dim(n, c)))
    for i, d in enumerate(image_dets):
        rel = relative_scores(d, by_class[d.class_id], n, options.use_calibrated)
        rs = assemble_rs(d, rel)
        osv = object_saliency(d, proposals, options.n_neighbors)
        rows[i] = np.concatenate([rs, osv, so])
    if options.kernel_map:
        rows = feature_map(rows)
    return rows


def corpus_features(
    corpus: DetectionCorpus,
    proposals: ProposalSet,
    options: FeatureOptions | None = None,
) -> dict[str, np.ndarray]:
    """Per-image feature matrices for a whole corpus."""
    return {
        image_id: image_features(dets, proposals.for_image(image_id), corpus.rosters, options)
        for image_id, dets in corpus.by_image.items()
    }


def write_feature_dump(path: str, corpus: DetectionCorpus, feats: dict[str, np.ndarray]) -> None:
    """image_id, in-image detection index, then the feature components."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(corpus.by_image):
            matrix = feats[image_id]
            for idx in range(matrix.shape[0]):
                vals = "\t".join(repr(x) for x in matrix[idx].tolist())
                fh.write(f"{image_id}\t{idx}\t{vals}\n")


def read_feature_dump(path: str) -> dict[str, np.ndarray]:
    rows: dict[str, list[tuple[int, np.ndarray]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected image, index and features")
            try:
                idx = int(parts[1])
                vec = np.array([float(t) for t in parts[2:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed record") from None
            rows.setdefault(parts[0], []).append((idx, vec))
    out: dict[str, np.ndarray] = {}
    for image_id, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        if [e[0] for e in entries] != list(range(len(entries))):
            raise DataError(f"{path}: non-contiguous detection indices for image {image_id}")
        out[image_id] = np.vstack([e[1] for e in entries])
    return out
