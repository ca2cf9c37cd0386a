"""File formats and the cross-fold split manifest."""

import pytest

from detfuse.corpus import (
    DetectionCorpus,
    ProposalRecord,
    ProposalSet,
    Rosters,
    assemble_split,
    load_detections,
    load_ground_truth,
    load_proposals,
    write_detections,
    write_ground_truth,
    write_proposals,
)
from detfuse.errors import DataError

from conftest import box, det, gt

ROSTERS = Rosters(("alpha", "beta"), ("cat", "dog"))


class TestRosters:
    def test_duplicate_names_rejected(self):
        with pytest.raises(DataError):
            Rosters(("a", "a"), ("x",))

    def test_lookup(self):
        assert ROSTERS.detector_id("beta") == 1
        assert ROSTERS.class_id("cat") == 0
        with pytest.raises(DataError):
            ROSTERS.detector_id("nope")

    def test_restrict(self):
        sub = ROSTERS.restrict_to_detector("beta")
        assert sub.detectors == ("beta",)
        assert sub.classes == ROSTERS.classes


class TestDetectionIO:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("")
        corpus = load_detections(str(p), ROSTERS)
        assert len(corpus) == 0

    def test_single_line_roundtrip(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("img1\tcat\talpha\t1.000000\t2.000000\t11.000000\t12.000000\t0.750000\n")
        corpus = load_detections(str(p), ROSTERS)
        assert len(corpus) == 1
        d = corpus.by_image["img1"][0]
        assert (d.class_id, d.detector_id, d.raw_score) == (0, 0, 0.75)
        assert d.box == box(1, 2, 11, 12)

    def test_invalid_box_reports_line_number(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text(
            "img1\tcat\talpha\t0.000000\t0.000000\t5.000000\t5.000000\t1.000000\n"
            "img1\tcat\talpha\t9.000000\t0.000000\t5.000000\t5.000000\t1.000000\n"
        )
        with pytest.raises(DataError, match=":2"):
            load_detections(str(p), ROSTERS)

    def test_unknown_names_rejected(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("img1\tbird\talpha\t0.000000\t0.000000\t5.000000\t5.000000\t1.000000\n")
        with pytest.raises(DataError, match="bird"):
            load_detections(str(p), ROSTERS)
        p.write_text("img1\tcat\tgamma\t0.000000\t0.000000\t5.000000\t5.000000\t1.000000\n")
        with pytest.raises(DataError, match="gamma"):
            load_detections(str(p), ROSTERS)

    def test_field_count_checked(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("img1\tcat\talpha\t0\t0\t5\t5\n")
        with pytest.raises(DataError, match="8 fields"):
            load_detections(str(p), ROSTERS)

    def test_write_read_write_is_stable(self, tmp_path):
        corpus = DetectionCorpus(ROSTERS)
        corpus.add(det(image="b", cls=1, detector=1, b=box(3, 4, 9, 11), raw=0.25))
        corpus.add(det(image="a", cls=0, detector=0, b=box(0, 0, 5, 5), raw=1.5))
        corpus.add(det(image="a", cls=1, detector=1, b=box(1, 1, 6, 6), raw=-0.5))
        p1, p2 = tmp_path / "one.tsv", tmp_path / "two.tsv"
        write_detections(str(p1), corpus)
        write_detections(str(p2), load_detections(str(p1), ROSTERS))
        assert p1.read_bytes() == p2.read_bytes()

    def test_order_preserved_within_image(self, tmp_path):
        corpus = DetectionCorpus(ROSTERS)
        for i, score in enumerate((0.3, 0.9, 0.1)):
            corpus.add(det(image="a", b=box(i, 0, i + 5, 5), raw=score))
        p = tmp_path / "d.tsv"
        write_detections(str(p), corpus)
        loaded = load_detections(str(p), ROSTERS)
        assert [d.raw_score for d in loaded.by_image["a"]] == [0.3, 0.9, 0.1]


class TestGroundTruthIO:
    def test_difficult_flag(self, tmp_path):
        p = tmp_path / "g.tsv"
        p.write_text("img1\tdog\t0.000000\t0.000000\t5.000000\t5.000000\t1\n")
        gts = load_ground_truth(str(p), ROSTERS)
        assert gts[0].difficult is True

    def test_duplicates_preserved(self, tmp_path):
        line = "img1\tcat\t0.000000\t0.000000\t5.000000\t5.000000\t0\n"
        p = tmp_path / "g.tsv"
        p.write_text(line * 2)
        assert len(load_ground_truth(str(p), ROSTERS)) == 2

    def test_unknown_class(self, tmp_path):
        p = tmp_path / "g.tsv"
        p.write_text("img1\tbird\t0.000000\t0.000000\t5.000000\t5.000000\t0\n")
        with pytest.raises(DataError, match="bird"):
            load_ground_truth(str(p), ROSTERS)

    def test_roundtrip(self, tmp_path):
        gts = [gt(image="b", cls=1, b=box(0, 0, 7, 7)), gt(image="a", cls=0, difficult=True)]
        p1, p2 = tmp_path / "one.tsv", tmp_path / "two.tsv"
        write_ground_truth(str(p1), gts, ROSTERS)
        write_ground_truth(str(p2), load_ground_truth(str(p1), ROSTERS), ROSTERS)
        assert p1.read_bytes() == p2.read_bytes()


class TestProposalIO:
    def test_confidence_rules(self):
        props = ProposalSet()
        props.add("img", "EES", ProposalRecord(box(0, 0, 5, 5), 0.5))
        with pytest.raises(DataError):
            props.add("img", "EES", ProposalRecord(box(0, 0, 5, 5), None))
        with pytest.raises(DataError):
            props.add("img", "OBJ", ProposalRecord(box(0, 0, 5, 5), 0.5))
        with pytest.raises(DataError):
            props.add("img", "WEIRD", ProposalRecord(box(0, 0, 5, 5), None))

    def test_roundtrip_with_dash(self, tmp_path):
        props = ProposalSet()
        props.add("img", "OBJ", ProposalRecord(box(0, 0, 5, 5), None))
        props.add("img", "EES", ProposalRecord(box(1, 1, 6, 6), 0.25))
        p1, p2 = tmp_path / "one.tsv", tmp_path / "two.tsv"
        write_proposals(str(p1), props)
        assert "\t-\n" in p1.read_text()
        write_proposals(str(p2), load_proposals(str(p1)))
        assert p1.read_bytes() == p2.read_bytes()


def _write_split(tmp_path, lines):
    for name in ("dt.tsv", "dv.tsv", "dtest.tsv", "g.tsv", "p.tsv"):
        (tmp_path / name).write_text("")
    p = tmp_path / "split.manifest"
    p.write_text("\n".join(lines) + "\n")
    return str(p)


class TestSplitManifest:
    def test_cross_fold_routing_accepted(self, tmp_path):
        path = _write_split(
            tmp_path,
            [
                "train.detections = dt.tsv @ val",
                "val.detections = dv.tsv @ train",
                "test.detections = dtest.tsv @ trainval",
                "train.ground_truth = g.tsv",
                "train.proposals = p.tsv",
            ],
        )
        manifest = assemble_split(path)
        assert manifest.fold("train").detections[0].provenance == "val"
        # trainval derives from train + val
        assert len(manifest.fold("trainval").detections) == 2
        assert manifest.fold_parts("trainval") == ["train", "val"]

    def test_same_fold_provenance_rejected(self, tmp_path):
        path = _write_split(tmp_path, ["train.detections = dt.tsv @ train"])
        with pytest.raises(DataError, match="cross-fold violation"):
            assemble_split(path)

    def test_trainval_provenance_overlaps_train(self, tmp_path):
        path = _write_split(tmp_path, ["train.detections = dt.tsv @ trainval"])
        with pytest.raises(DataError, match="cross-fold violation"):
            assemble_split(path)

    def test_missing_file_rejected(self, tmp_path):
        path = _write_split(tmp_path, ["train.detections = nowhere.tsv @ val"])
        with pytest.raises(DataError, match="missing file"):
            assemble_split(path)

    def test_detection_entry_needs_provenance(self, tmp_path):
        path = _write_split(tmp_path, ["train.detections = dt.tsv"])
        with pytest.raises(DataError, match="provenance"):
            assemble_split(path)

    def test_unknown_fold_rejected(self, tmp_path):
        path = _write_split(tmp_path, ["weird.detections = dt.tsv @ val"])
        with pytest.raises(DataError, match="unknown fold"):
            assemble_split(path)
