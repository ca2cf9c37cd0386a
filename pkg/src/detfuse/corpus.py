"""File ingestion and the cross-fold split manifest.

Line-oriented tab-separated records, one object per line:

- detection:    image_id  class_name  detector_name  x_min y_min x_max y_max  raw_score
- ground truth: image_id  class_name  x_min y_min x_max y_max  difficult(0|1)
- proposal:     image_id  source_name  x_min y_min x_max y_max  confidence(or "-")

Reals are serialized with 6 decimal places. Rosters (detector and class
names) always come from configuration, never inferred from the files, so
feature dimensions are fixed before any file is read. Files written here
are canonical: images sorted by id, records inside an image in original
order, so write(read(f)) == f for any file produced by the writers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .core import BoundingBox, Detection, GroundTruthObject
from .errors import DataError

PROPOSAL_SOURCES = ("OBJ", "CORE", "EES")
CONFIDENCE_SOURCES = frozenset({"EES"})


def _fmt(x: float) -> str:
    return f"{x:.6f}"


@dataclass(frozen=True)
class Rosters:
    """Fixed detector and class name lists; ids are list positions."""

    detectors: tuple[str, ...]
    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        for kind, names in (("detector", self.detectors), ("class", self.classes)):
            if len(set(names)) != len(names):
                raise DataError(f"duplicate {kind} names in roster: {names}")
            if not names:
                raise DataError(f"empty {kind} roster")

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def detector_id(self, name: str) -> int:
        try:
            return self.detectors.index(name)
        except ValueError:
            raise DataError(f"unknown detector name {name!r}") from None

    def class_id(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise DataError(f"unknown class name {name!r}") from None

    def restrict_to_detector(self, name: str) -> "Rosters":
        self.detector_id(name)
        return Rosters((name,), self.classes)


@dataclass
class DetectionCorpus:
    """Detections grouped by image, against fixed rosters."""

    rosters: Rosters
    by_image: dict[str, list[Detection]] = field(default_factory=dict)

    def add(self, det: Detection) -> None:
        if not 0 <= det.detector_id < self.rosters.n_detectors:
            raise DataError(f"detector id {det.detector_id} outside roster")
        if not 0 <= det.class_id < self.rosters.n_classes:
            raise DataError(f"class id {det.class_id} outside roster")
        self.by_image.setdefault(det.image_id, []).append(det)

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_image.values())

    def all_detections(self) -> list[Detection]:
        return [d for img in sorted(self.by_image) for d in self.by_image[img]]

    def restrict_to_detector(self, name: str) -> "DetectionCorpus":
        """Single-detector view with the detector remapped to id 0."""
        det_id = self.rosters.detector_id(name)
        sub = DetectionCorpus(self.rosters.restrict_to_detector(name))
        for image_id, dets in self.by_image.items():
            kept = [
                Detection(d.image_id, d.class_id, 0, d.box, d.raw_score, d.calibrated_score)
                for d in dets
                if d.detector_id == det_id
            ]
            if kept:
                sub.by_image[image_id] = kept
        return sub


@dataclass
class ProposalRecord:
    box: BoundingBox
    confidence: float | None = None


@dataclass
class ProposalSet:
    """Region proposals per image from the OBJ, CORE and EES sources."""

    by_image: dict[str, dict[str, list[ProposalRecord]]] = field(default_factory=dict)

    def add(self, image_id: str, source: str, rec: ProposalRecord) -> None:
        if source not in PROPOSAL_SOURCES:
            raise DataError(f"unknown proposal source {source!r}")
        has_conf = rec.confidence is not None
        if has_conf != (source in CONFIDENCE_SOURCES):
            raise DataError(
                f"source {source} {'must' if not has_conf else 'must not'} carry a confidence"
            )
        self.by_image.setdefault(image_id, {s: [] for s in PROPOSAL_SOURCES})[source].append(rec)

    def for_image(self, image_id: str) -> dict[str, list[ProposalRecord]]:
        return self.by_image.get(image_id, {s: [] for s in PROPOSAL_SOURCES})


def _parse_real(token: str, path: str, lineno: int, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad {what} value {token!r}") from None


def _parse_box(tokens: list[str], path: str, lineno: int) -> BoundingBox:
    vals = [_parse_real(t, path, lineno, "coordinate") for t in tokens]
    try:
        return BoundingBox(*vals)
    except DataError as e:
        raise DataError(f"{path}:{lineno}: {e}") from None


def load_detections(path: str, rosters: Rosters) -> DetectionCorpus:
    """Parse a detection file; unknown names or malformed lines are errors."""
    corpus = DetectionCorpus(rosters)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            image_id, class_name, detector_name = parts[0], parts[1], parts[2]
            try:
                class_id = rosters.class_id(class_name)
                detector_id = rosters.detector_id(detector_name)
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            box = _parse_box(parts[3:7], path, lineno)
            score = _parse_real(parts[7], path, lineno, "score")
            corpus.add(Detection(image_id, class_id, detector_id, box, score))
    return corpus


def write_detections(path: str, corpus: DetectionCorpus) -> None:
    rosters = corpus.rosters
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(corpus.by_image):
            for d in corpus.by_image[image_id]:
                fh.write(
                    "\t".join(
                        (
                            d.image_id,
                            rosters.classes[d.class_id],
                            rosters.detectors[d.detector_id],
                            _fmt(d.box.x_min),
                            _fmt(d.box.y_min),
                            _fmt(d.box.x_max),
                            _fmt(d.box.y_max),
                            _fmt(d.raw_score),
                        )
                    )
                    + "\n"
                )


def load_ground_truth(path: str, rosters: Rosters) -> list[GroundTruthObject]:
    """Parse a ground-truth file; duplicates are preserved."""
    out: list[GroundTruthObject] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                class_id = rosters.class_id(parts[1])
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            box = _parse_box(parts[2:6], path, lineno)
            if parts[6] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: difficult flag must be 0 or 1")
            out.append(GroundTruthObject(parts[0], class_id, box, parts[6] == "1"))
    return out


def write_ground_truth(path: str, gts: list[GroundTruthObject], rosters: Rosters) -> None:
    ordered = sorted(range(len(gts)), key=lambda i: gts[i].image_id)
    with open(path, "w", encoding="utf-8") as fh:
        for i in ordered:
            g = gts[i]
            fh.write(
                "\t".join(
                    (
                        g.image_id,
                        rosters.classes[g.class_id],
                        _fmt(g.box.x_min),
                        _fmt(g.box.y_min),
                        _fmt(g.box.x_max),
                        _fmt(g.box.y_max),
                        "1" if g.difficult else "0",
                    )
                )
                + "\n"
            )


def load_proposals(path: str) -> ProposalSet:
    props = ProposalSet()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            image_id, source = parts[0], parts[1]
            box = _parse_box(parts[2:6], path, lineno)
            conf = None if parts[6] == "-" else _parse_real(parts[6], path, lineno, "confidence")
            try:
                props.add(image_id, source, ProposalRecord(box, conf))
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return props


def write_proposals(path: str, props: ProposalSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(props.by_image):
            per_source = props.by_image[image_id]
            for source in PROPOSAL_SOURCES:
                for rec in per_source.get(source, []):
                    conf = "-" if rec.confidence is None else _fmt(rec.confidence)
                    fh.write(
                        "\t".join(
                            (
                                image_id,
                                source,
                                _fmt(rec.box.x_min),
                                _fmt(rec.box.y_min),
                                _fmt(rec.box.x_max),
                                _fmt(rec.box.y_max),
                                conf,
                            )
                        )
                        + "\n"
                    )


# --- split manifest -------------------------------------------------------

BASE_FOLDS = ("train", "val", "test")
FOLD_NAMES = BASE_FOLDS + ("trainval",)


def _base_folds(fold: str) -> frozenset[str]:
    if fold == "trainval":
        return frozenset({"train", "val"})
    if fold in BASE_FOLDS:
        return frozenset({fold})
    raise DataError(f"unknown fold name {fold!r}")


@dataclass
class DetectionEntry:
    path: str
    provenance: str  # fold the producing detector model was trained on


@dataclass
class FoldFiles:
    detections: list[DetectionEntry] = field(default_factory=list)
    ground_truth: str | None = None
    proposals: str | None = None


@dataclass
class SplitManifest:
    """Resolved file routing for the train/val/test folds.

    The ``trainval`` fold is derived as the union of ``train`` and
    ``val`` unless explicitly listed.
    """

    folds: dict[str, FoldFiles] = field(default_factory=dict)

    def fold(self, name: str) -> FoldFiles:
        if name in self.folds:
            return self.folds[name]
        if name == "trainval":
            merged = FoldFiles()
            for part in ("train", "val"):
                if part in self.folds:
                    merged.detections.extend(self.folds[part].detections)
            return merged
        raise DataError(f"fold {name!r} not present in manifest")

    def fold_parts(self, name: str) -> list[str]:
        """Base folds whose files make up ``name``."""
        if name == "trainval" and "trainval" not in self.folds:
            return [p for p in ("train", "val") if p in self.folds]
        self.fold(name)
        return [name]


def parse_split_manifest(path: str) -> SplitManifest:
    """Read ``fold.kind = path [@ provenance]`` lines into a manifest."""
    manifest = SplitManifest()
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'fold.kind = path'")
            key, value = (s.strip() for s in line.split("=", 1))
            if "." not in key:
                raise DataError(f"{path}:{lineno}: key must look like fold.kind")
            fold, kind = key.split(".", 1)
            if fold not in FOLD_NAMES:
                raise DataError(f"{path}:{lineno}: unknown fold {fold!r}")
            files = manifest.folds.setdefault(fold, FoldFiles())
            if kind == "detections":
                if "@" not in value:
                    raise DataError(
                        f"{path}:{lineno}: detection entries need a provenance: path @ fold"
                    )
                p, prov = (s.strip() for s in value.rsplit("@", 1))
                if prov not in FOLD_NAMES:
                    raise DataError(f"{path}:{lineno}: unknown provenance fold {prov!r}")
                files.detections.append(DetectionEntry(os.path.join(base, p), prov))
            elif kind == "ground_truth":
                files.ground_truth = os.path.join(base, value)
            elif kind == "proposals":
                files.proposals = os.path.join(base, value)
            else:
                raise DataError(f"{path}:{lineno}: unknown kind {kind!r}")
    return manifest


def assemble_split(path: str, require_exists: bool = True) -> SplitManifest:
    """Parse and validate a split manifest.

    Enforces the cross-fold rule: a detection file for fold F must come
    from a detector model trained on folds disjoint from F (trainval
    counts as train+val), otherwise context models would be learned on
    detections the producing detector overfits.
    """
    manifest = parse_split_manifest(path)
    for fold, files in manifest.folds.items():
        for entry in files.detections:
            if _base_folds(fold) & _base_folds(entry.provenance):
                raise DataError(
                    f"cross-fold violation: {fold} detections {entry.path} were produced "
                    f"by a model trained on {entry.provenance}"
                )
        if require_exists:
            paths = [e.path for e in files.detections]
            paths += [p for p in (files.ground_truth, files.proposals) if p is not None]
            for p in paths:
                if not os.path.exists(p):
                    raise DataError(f"manifest references missing file: {p}")
    return manifest
