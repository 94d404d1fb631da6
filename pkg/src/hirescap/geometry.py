"""Pure bounding-box arithmetic: IoU, area fractions, crop expansion, clustering.

Everything here is a pure function over immutable values and is safe to call
from any number of concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Axis-aligned rectangle in pixel space, origin top-left."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self.as_tuple()}")
        if min(self.x_min, self.y_min) < 0:
            raise ValueError(f"negative coordinates: {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains(self, other: BoundingBox) -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )


@dataclass(frozen=True)
class ImageDims:
    """Image size in whole pixels."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"non-positive dims: {self.width}x{self.height}")


@dataclass(frozen=True)
class Detection:
    """One detector hit for one label."""

    label: str
    box: BoundingBox
    confidence: float
    detector_id: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of range: {self.confidence}")
        normalized = self.label.strip().lower()
        if normalized != self.label:
            raise ValueError(f"label not normalized: {self.label!r}")


@dataclass
class DetectionCluster:
    """Cross-detector group of hits treated as one object instance.

    Seeded greedily by the highest-confidence detection; every member has
    IoU >= threshold against the seed box.  ``combined_score`` is filled in
    by the fusion layer, not here.
    """

    label: str
    seed: Detection
    members: list[Detection] = field(default_factory=list)
    combined_score: float | None = None

    def __len__(self) -> int:
        return len(self.members)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0.0 when the union is empty."""
    ix_min = max(a.x_min, b.x_min)
    iy_min = max(a.y_min, b.y_min)
    ix_max = min(a.x_max, b.x_max)
    iy_max = min(a.y_max, b.y_max)
    inter = max(0.0, ix_max - ix_min) * max(0.0, iy_max - iy_min)
    union = a.area + b.area - inter
    if union <= 0.0:
        # Two degenerate zero-area boxes; treat as non-overlapping noise.
        return 0.0
    return inter / union


def clamp_box(box: BoundingBox, dims: ImageDims) -> BoundingBox:
    """Clip a box to [0, width] x [0, height]."""
    return BoundingBox(
        min(max(box.x_min, 0.0), float(dims.width)),
        min(max(box.y_min, 0.0), float(dims.height)),
        min(max(box.x_max, 0.0), float(dims.width)),
        min(max(box.y_max, 0.0), float(dims.height)),
    )


def expand_and_clamp(box: BoundingBox, padding: float, dims: ImageDims) -> BoundingBox:
    """Grow each side by ``padding`` x side-length, then clip to the image."""
    if padding < 0:
        raise ValueError(f"negative padding: {padding}")
    pad_x = padding * box.width
    pad_y = padding * box.height
    grown = BoundingBox(
        max(0.0, box.x_min - pad_x),
        max(0.0, box.y_min - pad_y),
        box.x_max + pad_x,
        box.y_max + pad_y,
    )
    return clamp_box(grown, dims)


def area_fraction(box: BoundingBox, dims: ImageDims) -> float:
    """Fraction of the image covered by the box (after clamping)."""
    clamped = clamp_box(box, dims)
    return clamped.area / (dims.width * dims.height)


def round_half_away(value: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def _sort_key(d: Detection) -> tuple:
    # Total order: confidence desc, then detector id, then box coordinates.
    return (-d.confidence, d.detector_id, d.box.as_tuple())


def cluster_boxes(
    detections: list[Detection], iou_threshold: float
) -> list[DetectionCluster]:
    """Group same-label detections into clusters of one object instance.

    Greedy, NMS-style: the highest-confidence unassigned detection seeds a
    cluster and absorbs every unassigned detection whose IoU with the seed
    box meets the threshold.  The sort key is total, so identical inputs in
    any order produce identical clusters.
    """
    if not detections:
        return []
    labels = {d.label for d in detections}
    if len(labels) > 1:
        raise ValueError(f"cluster_boxes expects one label, got {sorted(labels)}")

    remaining = sorted(detections, key=_sort_key)
    clusters: list[DetectionCluster] = []
    while remaining:
        seed = remaining[0]
        members = [d for d in remaining if iou(d.box, seed.box) >= iou_threshold]
        if seed not in members:
            members.insert(0, seed)  # degenerate seed (zero-area, IoU 0 with itself)
        clusters.append(DetectionCluster(label=seed.label, seed=seed, members=members))
        assigned = set(map(id, members))
        remaining = [d for d in remaining if id(d) not in assigned]
    return clusters
