"""Workflow steps behind the CLI: simulate, calibrate, featurize, train,
rerank, eval, bound and analyze.

Each step reads its inputs from the workspace laid out by earlier steps,
writes canonical artifacts, and drops a run manifest (step name, seed,
config hash, package version) next to them, so a rerun with the same
config and seed is byte-identical.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .calibration import CalibrationTable, PlattParams, fit_platt
from .config import RunConfig
from .core import Detection, GroundTruthObject, iou
from .corpus import (
    DetectionCorpus,
    ProposalSet,
    Rosters,
    SplitManifest,
    assemble_split,
    load_detections,
    load_ground_truth,
    load_proposals,
    write_detections,
    write_ground_truth,
    write_proposals,
)
from .errors import DataError
from .evaluation import (
    ALL_POINTS,
    VOC07_11POINT,
    MatchResult,
    SimilarityGroups,
    average_precision,
    feature_importance,
    fp_taxonomy,
    match,
    maximal_ap,
    mean_ap,
    pr_curve,
    write_ap_report,
    write_importance_csv,
    write_pr_csv,
    write_taxonomy_csv,
)
from .features import corpus_features, feature_names, write_feature_dump
from .fusion import (
    RankedList,
    apply_calibration,
    naive_merge,
    ranked_from_scores,
    read_ranked,
    rerank,
    single_detector_rerank,
    write_ranked,
)
from .rankers import (
    PAIRWISE_HINGE,
    RankerModel,
    TrainingSet,
    load_model,
    save_model,
    train_pairwise,
    train_pointwise,
)
from .simulate import (
    SyntheticScene,
    generate_ground_truth,
    merge_corpora,
    simulate_detector,
    simulate_proposals,
    write_latents,
)

FOLDS = ("train", "val", "test")
# detection provenance per fold, mirroring the cross-fold routing
PROVENANCE = {"train": "val", "val": "train", "test": "trainval"}
_FOLD_INDEX = {"train": 0, "val": 1, "test": 2}
_PROV_INDEX = {"train": 0, "val": 1, "test": 2, "trainval": 3}


@dataclass
class Workspace:
    root: str

    def __post_init__(self) -> None:
        self.root = os.path.abspath(self.root)

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def ensure(self, *parts: str) -> str:
        p = self.path(*parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def data(self, name: str) -> str:
        return self.path("data", name)

    def split_manifest(self) -> str:
        return self.data("split.manifest")

    def calibration(self) -> str:
        return self.path("calibration.tsv")

    def features_dump(self, fold: str) -> str:
        return self.path("features", f"feats-{fold}.tsv")

    def model_dir(self, loss: str, single: str | None = None) -> str:
        name = f"single-{single}-{loss}" if single else loss
        return self.path("models", name)

    def ranked(self, name: str) -> str:
        return self.path("ranked", f"{name}.tsv")

    def report(self, name: str) -> str:
        return self.path("reports", name)


def _write_manifest(ws: Workspace, cfg: RunConfig, step: str, outputs: list[str]) -> None:
    path = ws.ensure("manifests", f"{step}.manifest")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"step = {step}\n")
        fh.write(f"version = {__version__}\n")
        fh.write(f"seed = {cfg.seed}\n")
        fh.write(f"config_sha256 = {cfg.config_hash}\n")
        for out in sorted(os.path.relpath(o, ws.root) for o in outputs):
            fh.write(f"output = {out}\n")


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


# --- data access ------------------------------------------------------------


def merge_proposal_sets(sets: list[ProposalSet]) -> ProposalSet:
    merged = ProposalSet()
    for s in sets:
        for image_id, per_source in s.by_image.items():
            if image_id in merged.by_image:
                raise DataError(f"duplicate image {image_id} across proposal files")
            merged.by_image[image_id] = per_source
    return merged


@dataclass
class FoldData:
    corpus: DetectionCorpus
    gts: list[GroundTruthObject]
    proposals: ProposalSet


def load_fold(manifest: SplitManifest, fold: str, rosters: Rosters) -> FoldData:
    parts = manifest.fold_parts(fold)
    corpora = []
    for entry in manifest.fold(fold).detections:
        corpora.append(load_detections(entry.path, rosters))
    corpus = merge_corpora(corpora, rosters) if corpora else DetectionCorpus(rosters)
    gts: list[GroundTruthObject] = []
    proposal_sets: list[ProposalSet] = []
    for part in parts:
        files = manifest.fold(part)
        if files.ground_truth:
            gts.extend(load_ground_truth(files.ground_truth, rosters))
        if files.proposals:
            proposal_sets.append(load_proposals(files.proposals))
    return FoldData(corpus, gts, merge_proposal_sets(proposal_sets))


def _load_split(ws: Workspace) -> SplitManifest:
    return assemble_split(ws.split_manifest())


# --- simulate ---------------------------------------------------------------


def run_simulate(cfg: RunConfig) -> list[str]:
    ws = Workspace(cfg.workspace)
    outputs = []
    for fold in FOLDS:
        scene = generate_ground_truth(
            cfg.scene, cfg.fold_images[fold], (cfg.seed, _FOLD_INDEX[fold]), prefix=fold
        )
        gt_path = ws.ensure("data", f"gt-{fold}.tsv")
        write_ground_truth(gt_path, scene.gts, cfg.rosters)
        latents_path = ws.ensure("data", f"latents-{fold}.tsv")
        write_latents(latents_path, scene)

        prov = PROVENANCE[fold]
        per_detector = []
        for det_index, name in enumerate(cfg.rosters.detectors):
            per_detector.append(
                simulate_detector(
                    scene,
                    cfg.profiles[name],
                    (cfg.seed, _FOLD_INDEX[fold], _PROV_INDEX[prov], det_index),
                    cfg.rosters,
                    name,
                )
            )
        corpus = merge_corpora(per_detector, cfg.rosters)
        det_path = ws.ensure("data", f"dets-{fold}.tsv")
        write_detections(det_path, corpus)

        props = simulate_proposals(
            scene, cfg.proposal_configs, (cfg.seed, _FOLD_INDEX[fold])
        )
        props_path = ws.ensure("data", f"props-{fold}.tsv")
        write_proposals(props_path, props)
        outputs += [gt_path, latents_path, det_path, props_path]

    manifest_path = ws.ensure("data", "split.manifest")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for fold in FOLDS:
            fh.write(f"{fold}.detections = dets-{fold}.tsv @ {PROVENANCE[fold]}\n")
            fh.write(f"{fold}.ground_truth = gt-{fold}.tsv\n")
            fh.write(f"{fold}.proposals = props-{fold}.tsv\n")
    outputs.append(manifest_path)
    assemble_split(manifest_path)
    _write_manifest(ws, cfg, "simulate", outputs)
    return outputs


# --- calibrate ---------------------------------------------------------------


def run_calibrate(cfg: RunConfig) -> str:
    ws = Workspace(cfg.workspace)
    manifest = _load_split(ws)
    data = load_fold(manifest, "trainval", cfg.rosters)
    table = CalibrationTable()
    gts_by_class: dict[int, list[GroundTruthObject]] = {}
    for g in data.gts:
        gts_by_class.setdefault(g.class_id, []).append(g)
    for det_id, det_name in enumerate(cfg.rosters.detectors):
        for class_id, class_name in enumerate(cfg.rosters.classes):
            scored = [
                (d, d.raw_score)
                for img in sorted(data.corpus.by_image)
                for d in data.corpus.by_image[img]
                if d.detector_id == det_id and d.class_id == class_id
            ]
            if not scored:
                _warn(f"no detections for {det_name}/{class_name}; default calibration")
                table.set(det_name, class_name, _prior_params(0, 0))
                continue
            result = match(scored, gts_by_class.get(class_id, []))
            scores, labels = [], []
            for e in result.entries:
                if e.kind == "ignored":
                    continue
                scores.append(e.detection.raw_score)
                labels.append(e.kind == "tp")
            n_pos, n_neg = sum(labels), len(labels) - sum(labels)
            if n_pos == 0 or n_neg == 0:
                _warn(
                    f"degenerate calibration set for {det_name}/{class_name} "
                    f"({n_pos} pos, {n_neg} neg); using constant prior"
                )
                table.set(det_name, class_name, _prior_params(n_pos, n_neg))
                continue
            table.set(det_name, class_name, fit_platt(np.array(scores), np.array(labels)))
    path = ws.calibration()
    table.save(path)
    _write_manifest(ws, cfg, "calibrate", [path])
    return path


def _prior_params(n_pos: int, n_neg: int) -> PlattParams:
    # constant sigmoid at the Laplace-smoothed precision prior
    p = (n_pos + 1.0) / (n_pos + n_neg + 2.0)
    return PlattParams(0.0, float(np.log((1.0 - p) / p)))


def _calibrated_fold(cfg: RunConfig, ws: Workspace, fold: str) -> FoldData:
    # calibrated scores are needed by naive merging and (by default) by
    # the feature blocks; attaching them is harmless otherwise
    manifest = _load_split(ws)
    data = load_fold(manifest, fold, cfg.rosters)
    table = CalibrationTable.load(ws.calibration())
    data.corpus = apply_calibration(data.corpus, table)
    return data


# --- featurize ---------------------------------------------------------------


def run_featurize(cfg: RunConfig, folds: list[str] | None = None) -> list[str]:
    ws = Workspace(cfg.workspace)
    outputs = []
    for fold in folds or ["trainval", "test"]:
        data = _calibrated_fold(cfg, ws, fold)
        feats = corpus_features(data.corpus, data.proposals, cfg.feature_options)
        path = ws.ensure("features", os.path.basename(ws.features_dump(fold)))
        write_feature_dump(path, data.corpus, feats)
        outputs.append(path)
    _write_manifest(ws, cfg, "featurize", outputs)
    return outputs


# --- train -------------------------------------------------------------------


def overlap_label(det: Detection, gts: list[GroundTruthObject]) -> tuple[float, bool]:
    """(overlap label, keep flag) for one detection.

    The label is the best IoU against a non-difficult same-class object;
    detections whose only strong overlap is a difficult object are
    dropped, mirroring how evaluation ignores them.
    """
    best_plain = 0.0
    best_difficult = 0.0
    for g in gts:
        if g.class_id != det.class_id or g.image_id != det.image_id:
            continue
        ov = iou(det.box, g.box)
        if g.difficult:
            best_difficult = max(best_difficult, ov)
        else:
            best_plain = max(best_plain, ov)
    keep = not (best_difficult > 0.5 and best_plain <= 0.5)
    return min(best_plain, 1.0), keep


def build_training_sets(
    corpus: DetectionCorpus,
    gts: list[GroundTruthObject],
    feats: dict[str, np.ndarray],
) -> dict[int, TrainingSet]:
    gts_by_image: dict[str, list[GroundTruthObject]] = {}
    for g in gts:
        gts_by_image.setdefault(g.image_id, []).append(g)
    rows: dict[int, list[np.ndarray]] = {}
    labels: dict[int, list[float]] = {}
    for image_id in sorted(corpus.by_image):
        matrix = feats[image_id]
        for idx, det in enumerate(corpus.by_image[image_id]):
            label, keep = overlap_label(det, gts_by_image.get(image_id, []))
            if not keep:
                continue
            rows.setdefault(det.class_id, []).append(matrix[idx])
            labels.setdefault(det.class_id, []).append(label)
    return {
        c: TrainingSet(np.vstack(rows[c]), np.array(labels[c])) for c in sorted(rows)
    }


def train_models(
    cfg: RunConfig,
    training_sets: dict[int, TrainingSet],
) -> dict[int, RankerModel]:
    models: dict[int, RankerModel] = {}
    for class_id, ts in training_sets.items():
        name = cfg.rosters.classes[class_id]
        try:
            if cfg.loss_tag == PAIRWISE_HINGE:
                models[class_id] = train_pairwise(ts, cfg.C, cfg.pair_policy, class_id)
            else:
                models[class_id] = train_pointwise(ts, cfg.loss_tag, cfg.C, class_id)
        except DataError as e:
            _warn(f"skipping model for class {name!r}: {e}")
    return models


def run_train(cfg: RunConfig, single: str | None = None) -> str:
    ws = Workspace(cfg.workspace)
    data = _calibrated_fold(cfg, ws, "trainval")
    corpus = data.corpus
    if single is not None:
        corpus = corpus.restrict_to_detector(single)
    feats = corpus_features(corpus, data.proposals, cfg.feature_options)
    sets = build_training_sets(corpus, data.gts, feats)
    models = train_models(cfg, sets)
    if not models:
        raise DataError("training produced no models")
    out_dir = ws.model_dir(cfg.loss_tag, single)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for class_id, model in sorted(models.items()):
        path = os.path.join(out_dir, f"{cfg.rosters.classes[class_id]}.model")
        save_model(path, model)
        outputs.append(path)
    _write_manifest(ws, cfg, f"train-single-{single}" if single else "train", outputs)
    return out_dir


def load_models(model_dir: str, rosters: Rosters) -> dict[int, RankerModel]:
    models: dict[int, RankerModel] = {}
    for class_id, name in enumerate(rosters.classes):
        path = os.path.join(model_dir, f"{name}.model")
        if os.path.exists(path):
            model = load_model(path)
            models[class_id] = model
    if not models:
        raise DataError(f"no model files found in {model_dir}")
    return models


# --- rerank ------------------------------------------------------------------


def detector_order_by_trainval_map(cfg: RunConfig, ws: Workspace) -> list[int]:
    """Best-first detector ids by mAP on the trainval detections."""
    manifest = _load_split(ws)
    data = load_fold(manifest, "trainval", cfg.rosters)
    scores = []
    for det_id, name in enumerate(cfg.rosters.detectors):
        sub = data.corpus.restrict_to_detector(name)
        ranked = ranked_from_scores(sub, use_calibrated=False)
        per_class, _ = evaluate_ranked(ranked, data.gts, cfg.rosters, cfg.protocol)
        value = mean_ap(per_class)
        scores.append((-(value if value is not None else -1.0), det_id))
    return [det_id for _, det_id in sorted(scores)]


def rerank_name(cfg: RunConfig, mode: str) -> str:
    if mode == "learned":
        return f"learned-{cfg.loss_tag}"
    if mode.startswith("single:"):
        return f"single-{mode.split(':', 1)[1]}-{cfg.loss_tag}"
    return mode


def run_rerank(cfg: RunConfig, mode: str, emit_suppressed: bool = False) -> str:
    ws = Workspace(cfg.workspace)
    data = _calibrated_fold(cfg, ws, "test")
    if mode == "learned":
        models = load_models(ws.model_dir(cfg.loss_tag), cfg.rosters)
        feats = corpus_features(data.corpus, data.proposals, cfg.feature_options)
        ranked = rerank(data.corpus, models, feats, cfg.nms)
    elif mode in ("naive-i", "naive-ii", "naive-iii"):
        order = detector_order_by_trainval_map(cfg, ws) if mode == "naive-iii" else None
        ranked = naive_merge(data.corpus, mode, order, cfg.nms)
    elif mode.startswith("single:"):
        detector = mode.split(":", 1)[1]
        models = load_models(ws.model_dir(cfg.loss_tag, detector), cfg.rosters)
        ranked = single_detector_rerank(
            data.corpus, detector, models, data.proposals, cfg.feature_options, cfg.nms
        )
    else:
        raise DataError(f"unknown rerank mode {mode!r}")
    path = ws.ensure("ranked", f"{rerank_name(cfg, mode)}.tsv")
    write_ranked(path, ranked, include_suppressed=emit_suppressed)
    _write_manifest(ws, cfg, f"rerank-{rerank_name(cfg, mode)}", [path])
    return path


# --- eval --------------------------------------------------------------------


def evaluate_ranked(
    ranked: RankedList,
    gts: list[GroundTruthObject],
    rosters: Rosters,
    protocol: str = ALL_POINTS,
) -> tuple[dict[int, float | None], dict[int, MatchResult]]:
    gts_by_class: dict[int, list[GroundTruthObject]] = {}
    for g in gts:
        gts_by_class.setdefault(g.class_id, []).append(g)
    per_class: dict[int, float | None] = {}
    results: dict[int, MatchResult] = {}
    for class_id in range(rosters.n_classes):
        result = match(ranked.scored_for_class(class_id), gts_by_class.get(class_id, []))
        results[class_id] = result
        per_class[class_id] = average_precision(result, protocol)
    return per_class, results


def run_eval(
    cfg: RunConfig,
    ranked_path: str | None = None,
    mode: str | None = None,
    detections_path: str | None = None,
    detector: str | None = None,
    use_calibrated: bool = False,
    fold: str = "test",
    name: str | None = None,
) -> dict[str, float | None]:
    ws = Workspace(cfg.workspace)
    manifest = _load_split(ws)
    data = load_fold(manifest, fold, cfg.rosters)
    if detections_path is not None:
        corpus = load_detections(detections_path, cfg.rosters)
        if detector is not None:
            corpus = corpus.restrict_to_detector(detector)
        if use_calibrated:
            corpus = apply_calibration(corpus, CalibrationTable.load(ws.calibration()))
        ranked = ranked_from_scores(corpus, use_calibrated)
        rosters = corpus.rosters
        default_name = f"detections-{detector}" if detector else "detections"
    else:
        if ranked_path is None:
            if mode is None:
                raise DataError("eval needs a ranked file, a mode, or a detections file")
            ranked_path = ws.ranked(rerank_name(cfg, mode))
        ranked = read_ranked(ranked_path, cfg.rosters)
        rosters = cfg.rosters
        default_name = os.path.splitext(os.path.basename(ranked_path))[0]
    label = name or default_name
    ap_all, _ = evaluate_ranked(ranked, data.gts, rosters, ALL_POINTS)
    ap_11, _ = evaluate_ranked(ranked, data.gts, rosters, VOC07_11POINT)
    text_path = ws.ensure("reports", f"eval-{label}.txt")
    csv_path = ws.ensure("reports", f"eval-{label}.csv")
    write_ap_report(text_path, csv_path, rosters.classes, ap_all, ap_11)
    m_all, m_11 = mean_ap(ap_all), mean_ap(ap_11)
    print(f"eval {label} [{fold}]")
    print(f"mAP {ALL_POINTS} = {'-' if m_all is None else format(m_all, '.6f')}")
    print(f"mAP {VOC07_11POINT} = {'-' if m_11 is None else format(m_11, '.6f')}")
    _write_manifest(ws, cfg, f"eval-{label}", [text_path, csv_path])
    return {ALL_POINTS: m_all, VOC07_11POINT: m_11}


# --- bound -------------------------------------------------------------------


def maximal_map_table(
    corpus: DetectionCorpus,
    gts: list[GroundTruthObject],
    rosters: Rosters,
    protocol: str,
    matching: str = "exact",
) -> dict[int, float | None]:
    gts_by_class: dict[int, list[GroundTruthObject]] = {}
    for g in gts:
        gts_by_class.setdefault(g.class_id, []).append(g)
    dets_by_class: dict[int, list[Detection]] = {}
    for img in sorted(corpus.by_image):
        for d in corpus.by_image[img]:
            dets_by_class.setdefault(d.class_id, []).append(d)
    return {
        class_id: maximal_ap(
            dets_by_class.get(class_id, []),
            gts_by_class.get(class_id, []),
            protocol,
            matching=matching,
        )
        for class_id in range(rosters.n_classes)
    }


def run_bound(cfg: RunConfig, fold: str = "test", matching: str = "exact") -> dict[str, float | None]:
    ws = Workspace(cfg.workspace)
    manifest = _load_split(ws)
    data = load_fold(manifest, fold, cfg.rosters)
    import csv as _csv

    scopes: list[tuple[str, DetectionCorpus]] = [
        (name, data.corpus.restrict_to_detector(name)) for name in cfg.rosters.detectors
    ]
    scopes.append(("combined", data.corpus))
    out: dict[str, float | None] = {}
    path = ws.ensure("reports", f"bound-{fold}.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["scope", "class", "max_ap_all_points", "max_ap_voc07_11point"])
        for scope_name, corpus in scopes:
            rosters = corpus.rosters
            table_all = maximal_map_table(corpus, data.gts, rosters, ALL_POINTS, matching)
            table_11 = maximal_map_table(corpus, data.gts, rosters, VOC07_11POINT, matching)
            for class_id, class_name in enumerate(cfg.rosters.classes):
                a, b = table_all.get(class_id), table_11.get(class_id)
                writer.writerow(
                    [scope_name, class_name,
                     "" if a is None else f"{a:.6f}", "" if b is None else f"{b:.6f}"]
                )
            m = mean_ap(table_all)
            out[scope_name] = m
            print(f"maximal mAP [{fold}] {scope_name} = {'-' if m is None else format(m, '.6f')}")
    _write_manifest(ws, cfg, f"bound-{fold}", [path])
    return out


# --- analyze -----------------------------------------------------------------


def similarity_groups(cfg: RunConfig) -> SimilarityGroups:
    if cfg.similarity:
        return SimilarityGroups.from_names(cfg.similarity, cfg.rosters.classes)
    return SimilarityGroups.singletons(cfg.rosters.n_classes)


def run_analyze(
    cfg: RunConfig,
    mode: str | None = None,
    ranked_path: str | None = None,
    fold: str = "test",
    taxonomy: bool = True,
    importance: bool = True,
    curves: bool = True,
) -> list[str]:
    ws = Workspace(cfg.workspace)
    manifest = _load_split(ws)
    data = load_fold(manifest, fold, cfg.rosters)
    if ranked_path is None:
        ranked_path = ws.ranked(rerank_name(cfg, mode or "learned"))
    ranked = read_ranked(ranked_path, cfg.rosters)
    label = os.path.splitext(os.path.basename(ranked_path))[0]
    outputs = []
    _, results = evaluate_ranked(ranked, data.gts, cfg.rosters, cfg.protocol)
    if taxonomy:
        report = fp_taxonomy(results, data.gts, similarity_groups(cfg))
        path = ws.ensure("reports", f"fp-taxonomy-{label}.csv")
        write_taxonomy_csv(path, report)
        outputs.append(path)
    if curves:
        curves_by_class = {
            cfg.rosters.classes[cid]: pr_curve(result, cfg.protocol)
            for cid, result in results.items()
            if result.n_positive > 0
        }
        path = ws.ensure("reports", f"pr-{label}.csv")
        write_pr_csv(path, curves_by_class)
        outputs.append(path)
    if importance:
        models = load_models(ws.model_dir(cfg.loss_tag), cfg.rosters)
        values = feature_importance(list(models.values()))
        names = feature_names(cfg.rosters, cfg.feature_options)
        path = ws.ensure("reports", "feature-importance.csv")
        write_importance_csv(path, names, values)
        outputs.append(path)
    _write_manifest(ws, cfg, f"analyze-{label}", outputs)
    return outputs
