"""Plain-text key=value run configuration.

One flat file drives every pipeline step; command-line ``--set key=value``
overrides are applied on top. No environment variables are consulted, so
a config file plus a seed fully determines every artifact.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

from .corpus import PROPOSAL_SOURCES, Rosters
from .errors import DataError
from .features import FeatureOptions
from .fusion import NmsOptions
from .rankers import LOSS_TAGS, PairPolicy
from .simulate import DetectorProfile, ProposalSourceConfig, SceneSpec

_KNOWN_PREFIXES = (
    "classes", "detectors", "seed", "workspace",
    "images.", "scene.", "detector.", "proposals.",
    "features.", "learner.", "pairs.", "nms.", "eval.", "similarity.",
)

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def parse_kv_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise DataError(f"{path}:{lineno}: empty key")
            out[key] = value
    return out


def apply_overrides(mapping: dict[str, str], overrides: list[str]) -> dict[str, str]:
    merged = dict(mapping)
    for item in overrides:
        if "=" not in item:
            raise DataError(f"override {item!r} must look like key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        merged[key] = value
    return merged


class _Mapping:
    def __init__(self, data: dict[str, str], origin: str) -> None:
        self.data = data
        self.origin = origin

    def get_str(self, key: str, default: str | None = None) -> str:
        if key in self.data:
            return self.data[key]
        if default is None:
            raise DataError(f"{self.origin}: missing required key {key!r}")
        return default

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self.get_str(key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError:
            raise DataError(f"{self.origin}: key {key!r} must be an integer") from None

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self.get_str(key, None if default is None else repr(default))
        try:
            return float(raw)
        except ValueError:
            raise DataError(f"{self.origin}: key {key!r} must be a number") from None

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self.get_str(key, str(default)).lower()
        if raw in _TRUE:
            return True
        if raw in _FALSE:
            return False
        raise DataError(f"{self.origin}: key {key!r} must be a boolean")

    def get_list(self, key: str) -> list[str]:
        return [t.strip() for t in self.get_str(key).split(",") if t.strip()]


@dataclass
class RunConfig:
    rosters: Rosters
    seed: int
    workspace: str
    fold_images: dict[str, int]
    scene: SceneSpec
    profiles: dict[str, DetectorProfile]
    proposal_configs: dict[str, ProposalSourceConfig]
    feature_options: FeatureOptions
    loss_tag: str
    C: float
    pair_policy: PairPolicy
    nms: NmsOptions
    protocol: str
    similarity: dict[str, str] = field(default_factory=dict)  # class name -> group
    config_hash: str = ""

    @classmethod
    def load(cls, path: str, overrides: list[str] | None = None) -> "RunConfig":
        mapping = apply_overrides(parse_kv_file(path), overrides or [])
        for key in mapping:
            if not any(
                key == p or (p.endswith(".") and key.startswith(p)) for p in _KNOWN_PREFIXES
            ):
                raise DataError(f"{path}: unknown configuration key {key!r}")
        m = _Mapping(mapping, path)

        classes = tuple(m.get_list("classes"))
        detectors = tuple(m.get_list("detectors"))
        rosters = Rosters(detectors, classes)
        seed = m.get_int("seed")
        base = os.path.dirname(os.path.abspath(path))
        workspace = os.path.normpath(os.path.join(base, m.get_str("workspace", "workspace")))

        fold_images = {
            fold: m.get_int(f"images.{fold}", default)
            for fold, default in (("train", 50), ("val", 50), ("test", 100))
        }

        weights = tuple(m.get_float(f"scene.class_weight.{c}", 1.0) for c in classes)
        scene = SceneSpec(
            class_weights=weights,
            canvas_width=m.get_float("scene.canvas_width", 640.0),
            canvas_height=m.get_float("scene.canvas_height", 480.0),
            mean_objects=m.get_float("scene.mean_objects", 3.0),
            max_objects=m.get_int("scene.max_objects", 12),
            min_size=m.get_float("scene.min_size", 40.0),
            max_size=m.get_float("scene.max_size", 160.0),
            max_gt_iou=m.get_float("scene.max_gt_iou", 0.5),
            place_retries=m.get_int("scene.place_retries", 100),
            difficult_fraction=m.get_float("scene.difficult_fraction", 0.05),
        )

        profiles = {}
        for name in detectors:
            p = f"detector.{name}"
            base_skill = m.get_float(f"{p}.skill", 0.6)
            skill = tuple(m.get_float(f"{p}.skill.{c}", base_skill) for c in classes)
            profiles[name] = DetectorProfile(
                skill=skill,
                loc_sigma=m.get_float(f"{p}.loc_sigma", 3.0),
                fp_rate=m.get_float(f"{p}.fp_rate", 1.0),
                tp_score_base=m.get_float(f"{p}.tp_score_base", 1.0),
                tp_score_gain=m.get_float(f"{p}.tp_score_gain", 2.0),
                tp_score_sigma=m.get_float(f"{p}.tp_score_sigma", 0.5),
                fp_score_mean=m.get_float(f"{p}.fp_score_mean", 1.0),
                fp_score_sigma=m.get_float(f"{p}.fp_score_sigma", 0.5),
                score_clip=(
                    m.get_float(f"{p}.score_clip_lo", 0.0),
                    m.get_float(f"{p}.score_clip_hi", 5.0),
                ),
            )

        proposal_configs = {}
        for source in PROPOSAL_SOURCES:
            p = f"proposals.{source}"
            proposal_configs[source] = ProposalSourceConfig(
                count=m.get_int(f"{p}.count", 40),
                jitter_sigma=m.get_float(f"{p}.jitter_sigma", 10.0),
                random_fraction=m.get_float(f"{p}.random_fraction", 0.3),
                confidence_noise=m.get_float(f"{p}.confidence_noise", 0.15),
            )

        feature_options = FeatureOptions(
            n_neighbors=m.get_int("features.n_neighbors", 10),
            use_calibrated=m.get_bool("features.use_calibrated", True),
            kernel_map=m.get_bool("features.kernel_map", False),
        )

        loss_tag = m.get_str("learner.loss", "logistic")
        if loss_tag not in LOSS_TAGS:
            raise DataError(f"{path}: unknown learner.loss {loss_tag!r}")
        C = m.get_float("learner.C", 1.0)
        pair_policy = PairPolicy(
            delta=m.get_float("pairs.delta", 0.1),
            max_pairs=m.get_int("pairs.max_pairs", 100_000),
            seed=seed,
        )

        metric = m.get_str("nms.metric", "coverage")
        if metric not in ("coverage", "iou"):
            raise DataError(f"{path}: nms.metric must be 'coverage' or 'iou'")
        nms = NmsOptions(
            coverage_threshold=m.get_float("nms.coverage_threshold", 0.4),
            metric=metric,
            correspondence_only=m.get_bool("nms.correspondence_only", True),
        )

        protocol = m.get_str("eval.protocol", "all-points")
        if protocol not in ("all-points", "voc07-11point"):
            raise DataError(f"{path}: unknown eval.protocol {protocol!r}")

        similarity: dict[str, str] = {}
        for key, value in mapping.items():
            if key.startswith("similarity."):
                group = key.split(".", 1)[1]
                for cls_name in (t.strip() for t in value.split(",") if t.strip()):
                    if cls_name not in classes:
                        raise DataError(f"{path}: unknown class {cls_name!r} in {key}")
                    similarity[cls_name] = group

        digest = hashlib.sha256(
            "\n".join(f"{k} = {v}" for k, v in sorted(mapping.items())).encode("utf-8")
        ).hexdigest()

        return cls(
            rosters=rosters,
            seed=seed,
            workspace=workspace,
            fold_images=fold_images,
            scene=scene,
            profiles=profiles,
            proposal_configs=proposal_configs,
            feature_options=feature_options,
            loss_tag=loss_tag,
            C=C,
            pair_policy=pair_policy,
            nms=nms,
            protocol=protocol,
            similarity=similarity,
            config_hash=digest,
        )
