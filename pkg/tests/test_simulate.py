"""Synthetic scene/detector/proposal generation: determinism and statistics."""

import numpy as np
import pytest

from detfuse.core import iou
from detfuse.corpus import Rosters, write_detections, write_ground_truth, write_proposals
from detfuse.errors import DataError
from detfuse.evaluation import ALL_POINTS, maximal_ap
from detfuse.simulate import (
    DetectorProfile,
    ProposalSourceConfig,
    SceneSpec,
    SyntheticScene,
    generate_ground_truth,
    merge_corpora,
    read_latents,
    simulate_detector,
    simulate_proposals,
    write_latents,
)

R1 = Rosters(("solo",), ("cat", "dog"))
R2 = Rosters(("left", "right"), ("cat", "dog"))
SPEC = SceneSpec(class_weights=(1.0, 1.0))


def perfect_profile(n_classes=2, **kw):
    return DetectorProfile(skill=(1.0,) * n_classes, loc_sigma=0.0, fp_rate=0.0, **kw)


class TestSceneGeneration:
    def test_zero_images_rejected(self):
        with pytest.raises(DataError):
            generate_ground_truth(SPEC, 0, seed=1)

    def test_deterministic_bytes(self, tmp_path):
        for name in ("one", "two"):
            scene = generate_ground_truth(SPEC, 25, seed=9)
            write_ground_truth(str(tmp_path / f"{name}.tsv"), scene.gts, R1)
            write_latents(str(tmp_path / f"{name}.lat"), scene)
        assert (tmp_path / "one.tsv").read_bytes() == (tmp_path / "two.tsv").read_bytes()
        assert (tmp_path / "one.lat").read_bytes() == (tmp_path / "two.lat").read_bytes()

    def test_mean_object_count(self):
        scene = generate_ground_truth(SPEC, 1000, seed=3)
        mean = len(scene.gts) / 1000
        assert abs(mean - SPEC.mean_objects) / SPEC.mean_objects < 0.10

    def test_boxes_inside_canvas(self):
        scene = generate_ground_truth(SPEC, 50, seed=5)
        for g in scene.gts:
            assert 0 <= g.box.x_min < g.box.x_max <= SPEC.canvas_width
            assert 0 <= g.box.y_min < g.box.y_max <= SPEC.canvas_height

    def test_placement_overlap_bounded(self):
        scene = generate_ground_truth(SPEC, 60, seed=7)
        by_image = scene.gts_by_image()
        for ids in by_image.values():
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    assert iou(scene.gts[ids[i]].box, scene.gts[ids[j]].box) <= SPEC.max_gt_iou + 1e-12

    def test_infeasible_placement_errors(self):
        cramped = SceneSpec(
            class_weights=(1.0,), canvas_width=100, canvas_height=100,
            min_size=90, max_size=99, mean_objects=8.0, max_gt_iou=0.01, place_retries=5,
        )
        with pytest.raises(DataError, match="could not place"):
            generate_ground_truth(cramped, 50, seed=1)

    def test_difficult_fraction(self):
        spec = SceneSpec(class_weights=(1.0,), difficult_fraction=0.2)
        scene = generate_ground_truth(spec, 500, seed=11)
        frac = sum(g.difficult for g in scene.gts) / len(scene.gts)
        assert abs(frac - 0.2) < 0.05
        # flags align with the hidden latent
        for g, u in zip(scene.gts, scene.difficulty):
            assert g.difficult == (u > 0.8)


class TestDetectorSimulation:
    def test_perfect_detector_reproduces_gt(self):
        scene = generate_ground_truth(SPEC, 30, seed=2)
        corpus = simulate_detector(scene, perfect_profile(), 4, R1, "solo")
        dets = corpus.all_detections()
        plain = [g for g in scene.gts]
        assert len(dets) == len(plain)
        assert maximal_ap(dets, scene.gts, ALL_POINTS) == 1.0
        gt_boxes = {(g.image_id, g.box.x_min, g.box.y_min, g.box.x_max, g.box.y_max) for g in plain}
        for d in dets:
            assert (d.image_id, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max) in gt_boxes

    def test_zero_skill_zero_tps(self):
        scene = generate_ground_truth(SPEC, 30, seed=2)
        profile = DetectorProfile(skill=(0.0, 0.0), fp_rate=0.0)
        corpus = simulate_detector(scene, profile, 4, R1, "solo")
        assert len(corpus) == 0

    def test_fp_poisson_rate(self):
        scene = generate_ground_truth(SPEC, 1000, seed=6)
        profile = DetectorProfile(skill=(0.0, 0.0), fp_rate=2.0)
        corpus = simulate_detector(scene, profile, 8, R1, "solo")
        assert abs(len(corpus) - 2000) / 2000 < 0.10

    def test_deterministic_bytes(self, tmp_path):
        scene = generate_ground_truth(SPEC, 20, seed=2)
        profile = DetectorProfile(skill=(0.7, 0.5), fp_rate=1.0)
        for name in ("one", "two"):
            corpus = simulate_detector(scene, profile, 4, R1, "solo")
            write_detections(str(tmp_path / f"{name}.tsv"), corpus)
        assert (tmp_path / "one.tsv").read_bytes() == (tmp_path / "two.tsv").read_bytes()

    def test_shared_latent_correlates_misses(self):
        scene = generate_ground_truth(SPEC, 200, seed=3)
        p = DetectorProfile(skill=(0.6, 0.6), fp_rate=0.0, loc_sigma=0.0)
        left = simulate_detector(scene, p, 10, R2, "left")
        right = simulate_detector(scene, p, 20, R2, "right")
        # identical skills on a shared latent: identical detection sets
        assert {(d.image_id, d.box.x_min) for d in left.all_detections()} == {
            (d.image_id, d.box.x_min) for d in right.all_detections()
        }

    def test_complementary_skills_raise_combined_bound(self):
        scene = generate_ground_truth(SPEC, 150, seed=4)
        left = simulate_detector(
            scene, DetectorProfile(skill=(0.8, 0.0), fp_rate=0.0, loc_sigma=0.0), 10, R2, "left"
        )
        right = simulate_detector(
            scene, DetectorProfile(skill=(0.0, 0.8), fp_rate=0.0, loc_sigma=0.0), 20, R2, "right"
        )
        combined = merge_corpora([left, right], R2)

        def bound(corpus):
            aps = []
            for cls in range(2):
                dets = [d for d in corpus.all_detections() if d.class_id == cls]
                gts = [g for g in scene.gts if g.class_id == cls]
                aps.append(maximal_ap(dets, gts, ALL_POINTS) or 0.0)
            return float(np.mean(aps))

        assert bound(combined) > bound(left)
        assert bound(combined) > bound(right)

    def test_skill_roster_mismatch(self):
        scene = generate_ground_truth(SPEC, 5, seed=2)
        with pytest.raises(DataError, match="skill vector"):
            simulate_detector(scene, DetectorProfile(skill=(1.0,)), 4, R1, "solo")


class TestProposalSimulation:
    def test_pure_covering_contains_every_gt_box(self):
        scene = generate_ground_truth(SPEC, 20, seed=5)
        cfg = {s: ProposalSourceConfig(count=30, jitter_sigma=0.0, random_fraction=0.0)
               for s in ("OBJ", "CORE", "EES")}
        props = simulate_proposals(scene, cfg, 6)
        by_image = scene.gts_by_image()
        for image_id, gt_ids in by_image.items():
            boxes = {
                (r.box.x_min, r.box.y_min, r.box.x_max, r.box.y_max)
                for r in props.for_image(image_id)["OBJ"]
            }
            for gi in gt_ids:
                g = scene.gts[gi].box
                assert (g.x_min, g.y_min, g.x_max, g.y_max) in boxes

    def test_pure_random_has_low_gt_overlap(self):
        scene = generate_ground_truth(SPEC, 100, seed=5)
        cfg = {s: ProposalSourceConfig(count=10, random_fraction=1.0) for s in ("OBJ", "CORE", "EES")}
        props = simulate_proposals(scene, cfg, 6)
        overlaps = []
        by_image = scene.gts_by_image()
        for image_id, gt_ids in by_image.items():
            for r in props.for_image(image_id)["OBJ"]:
                best = max((iou(r.box, scene.gts[gi].box) for gi in gt_ids), default=0.0)
                overlaps.append(best)
        assert np.mean(overlaps) < 0.5

    def test_ees_confidence_correlates_with_overlap(self):
        scene = generate_ground_truth(SPEC, 150, seed=5)
        cfg = {s: ProposalSourceConfig(count=12, random_fraction=0.5) for s in ("OBJ", "CORE", "EES")}
        props = simulate_proposals(scene, cfg, 6)
        by_image = scene.gts_by_image()
        xs, ys = [], []
        for image_id, gt_ids in by_image.items():
            for r in props.for_image(image_id)["EES"]:
                best = max((iou(r.box, scene.gts[gi].box) for gi in gt_ids), default=0.0)
                xs.append(best)
                ys.append(r.confidence)
        assert np.corrcoef(xs, ys)[0, 1] > 0.7

    def test_deterministic_bytes(self, tmp_path):
        scene = generate_ground_truth(SPEC, 15, seed=5)
        cfg = {s: ProposalSourceConfig(count=8) for s in ("OBJ", "CORE", "EES")}
        for name in ("one", "two"):
            write_proposals(str(tmp_path / f"{name}.tsv"), simulate_proposals(scene, cfg, 6))
        assert (tmp_path / "one.tsv").read_bytes() == (tmp_path / "two.tsv").read_bytes()


class TestLatentsSidecar:
    def test_roundtrip(self, tmp_path):
        scene = generate_ground_truth(SPEC, 10, seed=8)
        path = tmp_path / "latents.tsv"
        write_latents(str(path), scene)
        loaded = read_latents(str(path))
        per_image_index: dict[str, int] = {}
        for g, u in zip(scene.gts, scene.difficulty):
            idx = per_image_index.get(g.image_id, 0)
            per_image_index[g.image_id] = idx + 1
            assert loaded[(g.image_id, idx)] == u


class TestProfileValidation:
    def test_skill_range(self):
        with pytest.raises(DataError):
            DetectorProfile(skill=(1.2,))

    def test_negative_rates(self):
        with pytest.raises(DataError):
            DetectorProfile(skill=(0.5,), fp_rate=-1.0)

    def test_scene_validation(self):
        with pytest.raises(DataError):
            SceneSpec(class_weights=())
        with pytest.raises(DataError):
            SceneSpec(class_weights=(1.0,), min_size=50, max_size=10)
