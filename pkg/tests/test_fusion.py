"""Ensemble verification against spec'd examples and a brute-force reference."""

from __future__ import annotations

import random

import pytest
from shapely.geometry import box as shapely_box

from hirescap.backends import BackendHandle, BackendUnreachable, MockTransport
from hirescap.fusion import (
    AllDetectorsFailedError,
    CandidateSet,
    FusionSettings,
    NewObject,
    VerificationReport,
    assemble_report,
    combine_cluster_score,
    partition_for_pipeline,
    verify_candidates,
)
from hirescap.geometry import BoundingBox, Detection

from conftest import make_image


def det(label, x0, y0, x1, y1, conf, det_id):
    return Detection(label, BoundingBox(x0, y0, x1, y1), conf, det_id)


class TestCombineClusterScore:
    def test_two_of_three_detectors_reach_boundary(self):
        members = [det("lamp", 0, 0, 10, 10, 0.9, "d1"), det("lamp", 0, 0, 10, 10, 0.6, "d2")]
        assert combine_cluster_score(members, 3) == 0.5

    def test_single_weak_detection(self):
        members = [det("lamp", 0, 0, 10, 10, 0.6, "d1")]
        assert combine_cluster_score(members, 3) == pytest.approx(0.2)

    def test_unanimous_max(self):
        members = [det("lamp", 0, 0, 10, 10, 1.0, d) for d in ("d1", "d2", "d3")]
        assert combine_cluster_score(members, 3) == 1.0

    def test_duplicates_from_one_detector_do_not_double_count(self):
        members = [
            det("lamp", 0, 0, 10, 10, 0.9, "d1"),
            det("lamp", 1, 1, 10, 10, 0.8, "d1"),
        ]
        assert combine_cluster_score(members, 3) == pytest.approx(0.3)


class TestCandidateSet:
    def test_overlap_resolves_to_initial(self):
        cs = CandidateSet.build(["table", "lamp"], ["lamp", "cup"])
        assert cs.initial_objects == ("table", "lamp")
        assert cs.proposed_objects == ("cup",)
        assert cs.vocabulary == ["table", "lamp", "cup"]

    def test_deduplication(self):
        cs = CandidateSet.build(["a", "a", "b"], ["c", "c"])
        assert cs.initial_objects == ("a", "b")
        assert cs.proposed_objects == ("c",)


def detector_handle(table, detector_id):
    return BackendHandle(
        role="detector",
        model_id="m",
        transport=MockTransport({"detect": table}),
        detector_id=detector_id,
    )


def down_handle(detector_id):
    class Down:
        def request(self, req):
            raise BackendUnreachable("down", req.key)

    return BackendHandle(role="detector", model_id="m", transport=Down(), detector_id=detector_id)


@pytest.fixture
def image(tmp_path):
    return make_image(tmp_path / "scene.png", size=(640, 480), rects=())


FAST = FusionSettings(detector_jobs=1)


class TestVerifyCandidates:
    def test_spec_narrative(self, image):
        # table co-located thrice, lamp twice (mean exactly 0.5), umbrella never
        tables = [
            {"scene.png": {"table": [[300, 200, 600, 430, 0.9]], "lamp": [[120, 40, 220, 180, 0.9]]}},
            {"scene.png": {"table": [[305, 205, 595, 425, 0.8]], "lamp": [[122, 42, 218, 178, 0.6]]}},
            {"scene.png": {"table": [[298, 202, 602, 428, 0.7]]}},
        ]
        detectors = [detector_handle(t, f"d{i}") for i, t in enumerate(tables, 1)]
        candidates = CandidateSet.build(["table", "umbrella"], ["lamp"])
        report = verify_candidates(image, candidates, detectors, FAST)
        assert report.confirmed == ["table"]
        assert report.removed == ["umbrella"]
        assert [n.label for n in report.newly_detected] == ["lamp"]
        assert report.newly_detected[0].box.as_tuple() == (120, 40, 220, 180)
        assert report.flagged == []
        assert report.unverified_proposals == []

    def test_weak_proposal_unverified(self, image):
        detectors = [
            detector_handle({"scene.png": {"cup": [[0, 0, 10, 10, 0.4]]}}, "d1"),
            detector_handle({"scene.png": {}}, "d2"),
            detector_handle({"scene.png": {}}, "d3"),
        ]
        report = verify_candidates(
            image, CandidateSet.build(["table"], ["cup"]), detectors, FAST
        )
        assert report.unverified_proposals == ["cup"]
        assert report.newly_detected == []

    def test_total_absence_removes_everything(self, image):
        detectors = [detector_handle({"scene.png": {}}, f"d{i}") for i in (1, 2, 3)]
        report = verify_candidates(
            image, CandidateSet.build(["table", "chair"], ["lamp"]), detectors, FAST
        )
        assert report.removed == ["table", "chair"]
        assert report.newly_detected == []

    def test_boundary_score_verifies_inclusively(self, image):
        detectors = [
            detector_handle({"scene.png": {"cup": [[0, 0, 10, 10, 0.5]]}}, "d1"),
            detector_handle({"scene.png": {"cup": [[0, 0, 10, 10, 0.5]]}}, "d2"),
            detector_handle({"scene.png": {"cup": [[0, 0, 10, 10, 0.5]]}}, "d3"),
        ]
        report = verify_candidates(
            image, CandidateSet.build(["x"], ["cup"]), detectors, FAST
        )
        assert [n.label for n in report.newly_detected] == ["cup"]

    def test_initial_with_unverified_cluster_is_flagged_not_removed(self, image):
        detectors = [
            detector_handle({"scene.png": {"table": [[0, 0, 10, 10, 0.3]]}}, "d1"),
            detector_handle({"scene.png": {}}, "d2"),
            detector_handle({"scene.png": {}}, "d3"),
        ]
        report = verify_candidates(
            image, CandidateSet.build(["table"], ["cup"]), detectors, FAST
        )
        assert report.flagged == ["table"]
        assert report.removed == []

    def test_single_outage_degrades_with_warning(self, image):
        detectors = [
            detector_handle({"scene.png": {"lamp": [[0, 0, 10, 10, 0.9]]}}, "d1"),
            detector_handle({"scene.png": {"lamp": [[0, 0, 10, 10, 0.9]]}}, "d2"),
            down_handle("d3"),
        ]
        report = verify_candidates(
            image, CandidateSet.build(["x"], ["lamp"]), detectors, FAST
        )
        # denominator stays 3: (0.9 + 0.9 + 0) / 3 = 0.6 >= 0.5
        assert [n.label for n in report.newly_detected] == ["lamp"]
        assert any("d3" in w for w in report.warnings)

    def test_all_down_raises(self, image):
        detectors = [down_handle(f"d{i}") for i in (1, 2, 3)]
        with pytest.raises(AllDetectorsFailedError):
            verify_candidates(image, CandidateSet.build(["x"], []), detectors, FAST)

    def test_detector_order_irrelevant(self, image):
        tables = [
            {"scene.png": {"lamp": [[0, 0, 10, 10, 0.9]]}},
            {"scene.png": {"lamp": [[1, 1, 10, 10, 0.7]]}},
            {"scene.png": {}},
        ]
        ids = ["d1", "d2", "d3"]
        detectors = [detector_handle(t, i) for t, i in zip(tables, ids)]
        forward = verify_candidates(image, CandidateSet.build(["x"], ["lamp"]), detectors, FAST)
        detectors_rev = [detector_handle(t, i) for t, i in zip(reversed(tables), reversed(ids))]
        backward = verify_candidates(
            image, CandidateSet.build(["x"], ["lamp"]), detectors_rev, FAST
        )
        assert forward.to_dict() == backward.to_dict()

    def test_detectors_queried_once_with_full_vocabulary(self, image):
        detectors = [detector_handle({"scene.png": {}}, f"d{i}") for i in (1, 2, 3)]
        verify_candidates(image, CandidateSet.build(["a", "b"], ["c"]), detectors, FAST)
        for handle in detectors:
            assert handle.transport.calls == 1
            assert handle.transport.requests[0].payload["labels"] == ["a", "b", "c"]


class TestReportSerialization:
    def test_evidence_floor_trims_logs_but_never_drives_removal(self):
        report = assemble_report(
            CandidateSet.build(["table"], []),
            [det("table", 0, 0, 10, 10, 0.01, "d1")],
            detector_count=3,
        )
        # a 0.01 detection exists, so the label is kept (flagged), not removed
        assert report.flagged == ["table"]
        assert report.removed == []
        data = report.to_dict(evidence_floor=0.05)
        assert data["clusters"]["table"][0]["members"] == []  # trimmed from evidence
        assert data["flagged"] == ["table"]

    def test_round_trips_through_json(self):
        import json

        report = assemble_report(
            CandidateSet.build(["table"], ["lamp"]),
            [
                det("table", 0, 0, 10, 10, 0.9, "d1"),
                det("lamp", 20, 20, 30, 30, 0.9, "d1"),
                det("lamp", 20, 20, 30, 30, 0.8, "d2"),
            ],
            detector_count=3,
        )
        data = json.loads(json.dumps(report.to_dict()))
        assert data["confirmed"] == []  # 0.9/3 = 0.3 < 0.5
        assert data["flagged"] == ["table"]
        assert [n["label"] for n in data["newly_detected"]] == ["lamp"]


class TestPartition:
    def test_multiple_clusters_multiple_targets(self):
        report = VerificationReport(
            newly_detected=[
                NewObject("lamp", BoundingBox(0, 0, 10, 10)),
                NewObject("lamp", BoundingBox(100, 100, 110, 110)),
            ],
            removed=["umbrella"],
            confirmed=["table"],
        )
        part = partition_for_pipeline(report)
        assert len(part.zoom_targets) == 2
        assert part.removal_list == ("umbrella",)
        assert part.confirmed == ("table",)

    def test_empty_newly_detected(self):
        part = partition_for_pipeline(VerificationReport(confirmed=["a"]))
        assert part.zoom_targets == ()


# ---------------------------------------------------------------------------
# Brute-force reference


def oracle_iou(a: BoundingBox, b: BoundingBox) -> float:
    pa, pb = shapely_box(*a.as_tuple()), shapely_box(*b.as_tuple())
    union = pa.union(pb).area
    return pa.intersection(pb).area / union if union > 0 else 0.0


def oracle_report(candidates, detections, detector_count, iou_thr, comb_thr):
    """Independent re-derivation of the whole verification partition."""
    outcome = {
        "confirmed": [],
        "flagged": [],
        "removed": [],
        "newly": [],
        "unverified": [],
        "scores": {},
    }
    initial = set(candidates.initial_objects)
    for label in candidates.vocabulary:
        pool = [d for d in detections if d.label == label]
        clusters = []
        while pool:
            seed = pool[0]
            for candidate in pool[1:]:
                key_new = (-candidate.confidence, candidate.detector_id, candidate.box.as_tuple())
                key_old = (-seed.confidence, seed.detector_id, seed.box.as_tuple())
                if key_new < key_old:
                    seed = candidate
            members = []
            for d in pool:
                if d is seed or oracle_iou(d.box, seed.box) >= iou_thr:
                    members.append(d)
            best = {}
            for d in members:
                if d.detector_id not in best or d.confidence > best[d.detector_id]:
                    best[d.detector_id] = d.confidence
            score = sum(best[k] for k in sorted(best)) / detector_count
            clusters.append((seed, members, score))
            pool = [d for d in pool if d not in members]
        outcome["scores"][label] = sorted(round(score, 12) for _, _, score in clusters)
        verified = [c for c in clusters if c[2] >= comb_thr]
        if label in initial:
            if verified:
                outcome["confirmed"].append(label)
            elif clusters:
                outcome["flagged"].append(label)
            else:
                outcome["removed"].append(label)
        else:
            if verified:
                for seed, _, _ in verified:
                    outcome["newly"].append((label, seed.box.as_tuple()))
            else:
                outcome["unverified"].append(label)
    return outcome


def random_instance(rng: random.Random):
    detector_count = rng.randint(1, 3)
    detector_ids = [f"d{i}" for i in range(1, detector_count + 1)]
    labels = rng.sample(["apple", "bottle", "cat", "desk"], rng.randint(1, 4))
    split = rng.randint(0, len(labels))
    candidates = CandidateSet.build(labels[:split], labels[split:])
    detections = []
    for _ in range(rng.randint(0, 5)):
        x0 = rng.randint(0, 12)
        y0 = rng.randint(0, 12)
        detections.append(
            Detection(
                rng.choice(labels),
                BoundingBox(x0, y0, x0 + rng.randint(0, 6), y0 + rng.randint(0, 6)),
                rng.randint(0, 20) / 20.0,
                rng.choice(detector_ids),
            )
        )
    return candidates, detections, detector_count


def summarize(report: VerificationReport) -> dict:
    return {
        "confirmed": report.confirmed,
        "flagged": report.flagged,
        "removed": report.removed,
        "newly": [(n.label, n.box.as_tuple()) for n in report.newly_detected],
        "unverified": report.unverified_proposals,
        "scores": {
            label: sorted(round(c.combined_score, 12) for c in clusters)
            for label, clusters in report.all_clusters.items()
        },
    }


@pytest.mark.parametrize("seed", range(4))
def test_assemble_matches_brute_force(seed):
    rng = random.Random(1000 + seed)
    settings = FusionSettings(iou_threshold=0.7, combined_threshold=0.5)
    for _ in range(300):
        candidates, detections, detector_count = random_instance(rng)
        got = summarize(
            assemble_report(candidates, detections, detector_count, settings)
        )
        want = oracle_report(candidates, detections, detector_count, 0.7, 0.5)
        assert got == want


def test_monotonicity_raising_confidence_never_unverifies():
    rng = random.Random(7)
    settings = FusionSettings()
    for _ in range(200):
        candidates, detections, detector_count = random_instance(rng)
        report = assemble_report(candidates, detections, detector_count, settings)
        before = {(n.label, n.box.as_tuple()) for n in report.newly_detected}
        if not detections:
            continue
        idx = rng.randrange(len(detections))
        bumped = list(detections)
        d = bumped[idx]
        bumped[idx] = Detection(d.label, d.box, min(1.0, d.confidence + 0.2), d.detector_id)
        after_report = assemble_report(candidates, bumped, detector_count, settings)
        after = {(n.label, n.box.as_tuple()) for n in after_report.newly_detected}
        # clusters can reshape around the bumped seed, but verified labels never vanish
        assert {lb for lb, _ in before} <= {lb for lb, _ in after} | set(
            after_report.confirmed
        )
