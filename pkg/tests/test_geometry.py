"""Box arithmetic against hand-derived values, shapely, and hypothesis."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box as shapely_box

from hirescap.geometry import (
    BoundingBox,
    Detection,
    ImageDims,
    area_fraction,
    cluster_boxes,
    clamp_box,
    expand_and_clamp,
    iou,
    round_half_away,
)


def oracle_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Independent IoU via shapely polygons."""
    pa = shapely_box(*a.as_tuple())
    pb = shapely_box(*b.as_tuple())
    union = pa.union(pb).area
    if union <= 0:
        return 0.0
    return pa.intersection(pb).area / union


def boxes(max_coord=1000.0):
    coord = st.floats(min_value=0.0, max_value=max_coord, allow_nan=False)

    @st.composite
    def build(draw):
        x = sorted((draw(coord), draw(coord)))
        y = sorted((draw(coord), draw(coord)))
        return BoundingBox(x[0], y[0], x[1], y[1])

    return build()


class TestBoundingBox:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            BoundingBox(10, 0, 5, 5)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            BoundingBox(-1, 0, 5, 5)

    def test_area(self):
        assert BoundingBox(0, 0, 10, 20).area == 200


class TestIou:
    def test_identity(self):
        a = BoundingBox(0, 0, 10, 10)
        assert iou(a, a) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30)) == 0.0

    def test_hand_derived_overlap(self):
        # intersection 5x5 = 25, union 100 + 100 - 25 = 175
        value = iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 15, 15))
        assert value == pytest.approx(25 / 175, abs=1e-9)

    def test_identical_zero_area_defined_zero(self):
        point = BoundingBox(5, 5, 5, 5)
        assert iou(point, point) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    @given(boxes())
    def test_self_iou_one_for_positive_area(self, a):
        if a.area > 0:
            assert iou(a, a) == 1.0

    @settings(max_examples=200)
    @given(boxes(max_coord=50.0), boxes(max_coord=50.0))
    def test_matches_shapely(self, a, b):
        assert iou(a, b) == pytest.approx(oracle_iou(a, b), abs=1e-9)


class TestExpandAndClamp:
    DIMS = ImageDims(1000, 1000)

    def test_symmetric_growth(self):
        out = expand_and_clamp(BoundingBox(100, 100, 200, 200), 0.1, self.DIMS)
        assert out.as_tuple() == (90, 90, 210, 210)

    def test_clamps_at_origin(self):
        out = expand_and_clamp(BoundingBox(0, 0, 50, 50), 0.1, self.DIMS)
        assert out.as_tuple() == (0, 0, 55, 55)

    def test_zero_padding_is_identity(self):
        box = BoundingBox(100, 100, 200, 200)
        assert expand_and_clamp(box, 0.0, self.DIMS) == box

    def test_rejects_negative_padding(self):
        with pytest.raises(ValueError):
            expand_and_clamp(BoundingBox(0, 0, 1, 1), -0.1, self.DIMS)

    @given(boxes(max_coord=1200.0), st.floats(min_value=0.0, max_value=2.0))
    def test_output_inside_image_and_contains_clamped_input(self, box, padding):
        out = expand_and_clamp(box, padding, self.DIMS)
        assert 0 <= out.x_min <= out.x_max <= self.DIMS.width
        assert 0 <= out.y_min <= out.y_max <= self.DIMS.height
        assert out.contains(clamp_box(box, self.DIMS))


class TestAreaFraction:
    def test_small_object_in_4k(self):
        frac = area_fraction(BoundingBox(0, 0, 100, 100), ImageDims(3840, 2160))
        assert frac == pytest.approx(10000 / 8294400, abs=1e-12)

    def test_full_image(self):
        assert area_fraction(BoundingBox(0, 0, 640, 480), ImageDims(640, 480)) == 1.0

    def test_zero_area(self):
        assert area_fraction(BoundingBox(5, 5, 5, 5), ImageDims(640, 480)) == 0.0


class TestRounding:
    @pytest.mark.parametrize(
        "value,expected",
        [(10.4, 10), (10.5, 11), (20.0, 20), (0.5, 1), (1.5, 2), (2.5, 3), (0.0, 0)],
    )
    def test_half_away_from_zero(self, value, expected):
        assert round_half_away(value) == expected


def det(x0, y0, x1, y1, conf, det_id="d1", label="lamp"):
    return Detection(label, BoundingBox(x0, y0, x1, y1), conf, det_id)


class TestClusterBoxes:
    def test_same_box_two_detectors_merge(self):
        clusters = cluster_boxes(
            [det(0, 0, 10, 10, 0.9, "d1"), det(0, 0, 10, 10, 0.6, "d2")], 0.7
        )
        assert len(clusters) == 1
        assert len(clusters[0].members) == 2
        assert clusters[0].seed.confidence == 0.9

    def test_low_overlap_stays_separate(self):
        clusters = cluster_boxes(
            [det(0, 0, 10, 10, 0.9, "d1"), det(5, 5, 15, 15, 0.8, "d2")], 0.7
        )
        assert len(clusters) == 2

    def test_empty(self):
        assert cluster_boxes([], 0.7) == []

    def test_rejects_mixed_labels(self):
        with pytest.raises(ValueError):
            cluster_boxes(
                [det(0, 0, 1, 1, 0.5, label="lamp"), det(0, 0, 1, 1, 0.5, label="cup")],
                0.7,
            )

    def test_members_meet_threshold_against_seed(self):
        dets = [
            det(0, 0, 10, 10, 0.9, "d1"),
            det(1, 1, 11, 11, 0.8, "d2"),
            det(2, 2, 12, 12, 0.7, "d3"),
        ]
        for cluster in cluster_boxes(dets, 0.7):
            for member in cluster.members:
                if member is not cluster.seed:
                    assert iou(member.box, cluster.seed.box) >= 0.7

    @given(
        st.lists(
            st.tuples(
                st.integers(0, 12),
                st.integers(0, 12),
                st.integers(0, 6),
                st.integers(0, 6),
                st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]),
                st.sampled_from(["d1", "d2", "d3"]),
            ),
            max_size=12,
        ),
        st.sampled_from([0.3, 0.5, 0.7]),
    )
    def test_partition_and_order_invariance(self, raw, threshold):
        dets = [det(x, y, x + w, y + h, c, d) for x, y, w, h, c, d in raw]
        clusters = cluster_boxes(dets, threshold)
        # partition: sizes sum to input, nothing assigned twice
        assert sum(len(c.members) for c in clusters) == len(dets)
        seen = []
        for cluster in clusters:
            seen.extend(id(m) for m in cluster.members)
        assert len(seen) == len(set(seen))
        # determinism under permutation
        reversed_clusters = cluster_boxes(list(reversed(dets)), threshold)
        key = lambda cs: [
            (c.seed.box.as_tuple(), sorted((m.detector_id, m.box.as_tuple(), m.confidence) for m in c.members))
            for c in cs
        ]
        assert key(clusters) == key(reversed_clusters)
