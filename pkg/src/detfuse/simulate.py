"""Seeded synthetic scenes, detectors and proposal sources.

Every object carries a hidden difficulty latent u ~ U[0,1] shared by all
detectors: a detector with per-class skill s detects the object iff
s > u, so hard objects are missed by every detector (correlated misses)
while complementary skills produce complementary detections. Detected
boxes get Gaussian corner jitter, false positives arrive as a Poisson
stream of random boxes, and scores come from clipped Gaussians whose TP
mean grows with (1 - u), giving calibration a real signal to learn.

Everything is deterministic for a fixed seed: each (image, stream) pair
draws from its own generator keyed by integers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BoundingBox, Detection, GroundTruthObject
from .corpus import PROPOSAL_SOURCES, DetectionCorpus, ProposalRecord, ProposalSet, Rosters
from .errors import DataError


@dataclass(frozen=True)
class SceneSpec:
    class_weights: tuple[float, ...]
    canvas_width: float = 640.0
    canvas_height: float = 480.0
    mean_objects: float = 3.0
    max_objects: int = 12
    min_size: float = 40.0
    max_size: float = 160.0
    max_gt_iou: float = 0.5       # placement constraint between GT boxes
    place_retries: int = 100
    difficult_fraction: float = 0.05

    def __post_init__(self) -> None:
        if not self.class_weights or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise DataError("class weights must be non-negative and sum to > 0")
        if self.min_size <= 0 or self.max_size < self.min_size:
            raise DataError("invalid object size range")
        if self.max_size > min(self.canvas_width, self.canvas_height):
            raise DataError("max object size exceeds canvas")


@dataclass(frozen=True)
class DetectorProfile:
    skill: tuple[float, ...]      # per class, probability-like in [0,1]
    loc_sigma: float = 3.0        # corner jitter, pixels
    fp_rate: float = 1.0          # expected false positives per image
    tp_score_base: float = 1.0
    tp_score_gain: float = 2.0    # TP score mean = base + gain * (1 - u)
    tp_score_sigma: float = 0.5
    fp_score_mean: float = 1.0
    fp_score_sigma: float = 0.5
    score_clip: tuple[float, float] = (0.0, 5.0)

    def __post_init__(self) -> None:
        if any(not 0.0 <= s <= 1.0 for s in self.skill):
            raise DataError("detector skill must lie in [0, 1]")
        if self.loc_sigma < 0 or self.fp_rate < 0 or self.tp_score_sigma < 0 or self.fp_score_sigma < 0:
            raise DataError("noise rates must be non-negative")


@dataclass(frozen=True)
class ProposalSourceConfig:
    count: int = 40
    jitter_sigma: float = 10.0
    random_fraction: float = 0.3
    confidence_noise: float = 0.15  # used by the confidence-bearing source


@dataclass
class SyntheticScene:
    spec: SceneSpec
    image_ids: list[str]
    gts: list[GroundTruthObject]   # grouped by image, image order
    difficulty: list[float]        # aligned with gts

    def gts_by_image(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {i: [] for i in self.image_ids}
        for idx, g in enumerate(self.gts):
            out[g.image_id].append(idx)
        return out


Seed = int | tuple[int, ...]


def _rng(seed: Seed, *stream: int) -> np.random.Generator:
    key = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(key + list(stream))


def _random_box(rng: np.random.Generator, spec: SceneSpec) -> BoundingBox:
    w = rng.uniform(spec.min_size, spec.max_size)
    h = rng.uniform(spec.min_size, spec.max_size)
    x0 = rng.uniform(0.0, spec.canvas_width - w)
    y0 = rng.uniform(0.0, spec.canvas_height - h)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def generate_ground_truth(
    spec: SceneSpec, n_images: int, seed: Seed, prefix: str = "img"
) -> SyntheticScene:
    """Scenes with Poisson object counts and bounded mutual overlap."""
    from .core import iou

    if n_images < 1:
        raise DataError("n_images must be >= 1")
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    image_ids: list[str] = []
    gts: list[GroundTruthObject] = []
    difficulty: list[float] = []
    for img in range(n_images):
        image_id = f"{prefix}_{img:06d}"
        image_ids.append(image_id)
        rng = _rng(seed, 0, img)
        n_obj = min(int(rng.poisson(spec.mean_objects)), spec.max_objects)
        placed: list[BoundingBox] = []
        for _ in range(n_obj):
            box = None
            for _ in range(spec.place_retries):
                cand = _random_box(rng, spec)
                if all(iou(cand, other) <= spec.max_gt_iou for other in placed):
                    box = cand
                    break
            if box is None:
                raise DataError(
                    f"could not place object in image {image_id} after "
                    f"{spec.place_retries} retries"
                )
            placed.append(box)
            class_id = int(rng.choice(weights.size, p=weights))
            u = float(rng.uniform())
            gts.append(
                GroundTruthObject(image_id, class_id, box, u > 1.0 - spec.difficult_fraction)
            )
            difficulty.append(u)
    return SyntheticScene(spec, image_ids, gts, difficulty)


def _clipped_normal(rng: np.random.Generator, mean: float, sigma: float, clip) -> float:
    return float(np.clip(rng.normal(mean, sigma), clip[0], clip[1]))


def _jitter_box(rng: np.random.Generator, box: BoundingBox, sigma: float) -> BoundingBox:
    if sigma == 0.0:
        return box
    x0, y0, x1, y1 = (
        box.x_min + rng.normal(0.0, sigma),
        box.y_min + rng.normal(0.0, sigma),
        box.x_max + rng.normal(0.0, sigma),
        box.y_max + rng.normal(0.0, sigma),
    )
    if x1 <= x0:
        x0, x1 = min(x0, x1), max(x0, x1) + 1.0
    if y1 <= y0:
        y0, y1 = min(y0, y1), max(y0, y1) + 1.0
    return BoundingBox(x0, y0, x1, y1)


def simulate_detector(
    scene: SyntheticScene,
    profile: DetectorProfile,
    seed: Seed,
    rosters: Rosters,
    detector_name: str,
) -> DetectionCorpus:
    """One detector's output over the scene.

    Objects are detected iff the class skill exceeds the shared
    difficulty latent; detected boxes are jittered and scored by the TP
    distribution, and Poisson false positives with random boxes and the
    FP score distribution are added.
    """
    if len(profile.skill) != rosters.n_classes:
        raise DataError("profile skill vector does not match class roster")
    detector_id = rosters.detector_id(detector_name)
    corpus = DetectionCorpus(rosters)
    by_image = scene.gts_by_image()
    for img_index, image_id in enumerate(scene.image_ids):
        rng = _rng(seed, 1, img_index)
        dets: list[Detection] = []
        for gt_idx in by_image[image_id]:
            g = scene.gts[gt_idx]
            u = scene.difficulty[gt_idx]
            if profile.skill[g.class_id] <= u:
                continue
            box = _jitter_box(rng, g.box, profile.loc_sigma)
            score = _clipped_normal(
                rng,
                profile.tp_score_base + profile.tp_score_gain * (1.0 - u),
                profile.tp_score_sigma,
                profile.score_clip,
            )
            dets.append(Detection(image_id, g.class_id, detector_id, box, score))
        weights = np.asarray(scene.spec.class_weights, dtype=np.float64)
        weights = weights / weights.sum()
        for _ in range(int(rng.poisson(profile.fp_rate))):
            box = _random_box(rng, scene.spec)
            class_id = int(rng.choice(weights.size, p=weights))
            score = _clipped_normal(
                rng, profile.fp_score_mean, profile.fp_score_sigma, profile.score_clip
            )
            dets.append(Detection(image_id, class_id, detector_id, box, score))
        if dets:
            corpus.by_image.setdefault(image_id, []).extend(dets)
    return corpus


def merge_corpora(corpora: list[DetectionCorpus], rosters: Rosters) -> DetectionCorpus:
    """Union of per-detector corpora, detections in corpus order."""
    merged = DetectionCorpus(rosters)
    image_ids = sorted({img for c in corpora for img in c.by_image})
    for image_id in image_ids:
        rows: list[Detection] = []
        for c in corpora:
            rows.extend(c.by_image.get(image_id, []))
        merged.by_image[image_id] = rows
    return merged


def simulate_proposals(
    scene: SyntheticScene,
    configs: dict[str, ProposalSourceConfig],
    seed: Seed,
) -> ProposalSet:
    """Object-covering jittered boxes mixed with uniform random boxes.

    The EES source also emits confidences correlated with the proposal's
    best ground-truth overlap.
    """
    from .core import iou

    props = ProposalSet()
    by_image = scene.gts_by_image()
    for img_index, image_id in enumerate(scene.image_ids):
        gt_boxes = [scene.gts[i].box for i in by_image[image_id]]
        for src_index, source in enumerate(PROPOSAL_SOURCES):
            cfg = configs.get(source, ProposalSourceConfig())
            rng = _rng(seed, 2, img_index, src_index)
            n_random = int(round(cfg.count * cfg.random_fraction))
            n_cover = cfg.count - n_random if gt_boxes else 0
            boxes: list[BoundingBox] = []
            for k in range(n_cover):
                base = gt_boxes[k % len(gt_boxes)]
                boxes.append(_jitter_box(rng, base, cfg.jitter_sigma))
            for _ in range(cfg.count - n_cover - n_random):
                boxes.append(_random_box(rng, scene.spec))
            for _ in range(n_random):
                boxes.append(_random_box(rng, scene.spec))
            for box in boxes:
                conf = None
                if source == "EES":
                    best = max((iou(box, g) for g in gt_boxes), default=0.0)
                    conf = float(np.clip(best + rng.normal(0.0, cfg.confidence_noise), 0.0, 1.0))
                props.add(image_id, source, ProposalRecord(box, conf))
    return props


# --- difficulty sidecar -----------------------------------------------------


def write_latents(path: str, scene: SyntheticScene) -> None:
    """Hidden difficulty latents, never part of the ground-truth file."""
    per_image_index: dict[str, int] = {}
    with open(path, "w", encoding="utf-8") as fh:
        for g, u in zip(scene.gts, scene.difficulty):
            idx = per_image_index.get(g.image_id, 0)
            per_image_index[g.image_id] = idx + 1
            fh.write(f"{g.image_id}\t{idx}\t{u!r}\n")


def read_latents(path: str) -> dict[tuple[str, int], float]:
    out: dict[tuple[str, int], float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields")
            out[(parts[0], int(parts[1]))] = float(parts[2])
    return out
