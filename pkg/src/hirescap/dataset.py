"""COCO-style annotation ingestion, complex-scene filtering, and corpus stats.

The filter keeps 4K images with many unique classes, many small objects, and
a crowd of people; the stats (per-label image frequency and pairwise
co-occurrence) feed the popular/adversarial negative samplers in the
evaluation harness.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import BoundingBox, ImageDims, area_fraction


@dataclass(frozen=True)
class ImageAnnotation:
    """Ground-truth objects for one image."""

    image_id: str
    dims: ImageDims
    objects: tuple[tuple[str, BoundingBox], ...]

    @property
    def labels(self) -> set[str]:
        return {label for label, _ in self.objects}


@dataclass(frozen=True)
class FilterCriteria:
    """Thresholds for the complex-scene subset."""

    min_unique_classes: int = 15
    min_small_objects: int = 10
    small_area_fraction: float = 0.01
    min_persons: int = 5
    required_dims: tuple[int, int] = (3840, 2160)
    person_label: str = "person"
    exact_dims: bool = True  # False accepts >= required in either orientation

    def __post_init__(self) -> None:
        if min(self.min_unique_classes, self.min_small_objects, self.min_persons) < 0:
            raise ValueError("criteria minima must be >= 0")
        if not 0.0 < self.small_area_fraction < 1.0:
            raise ValueError(
                f"small_area_fraction must be in (0,1): {self.small_area_fraction}"
            )


def _dims_pass(dims: ImageDims, criteria: FilterCriteria) -> bool:
    rw, rh = criteria.required_dims
    if criteria.exact_dims:
        return (dims.width, dims.height) == (rw, rh)
    return (dims.width >= rw and dims.height >= rh) or (
        dims.width >= rh and dims.height >= rw
    )


def matches(annotation: ImageAnnotation, criteria: FilterCriteria) -> bool:
    if not _dims_pass(annotation.dims, criteria):
        return False
    if len(annotation.labels) < criteria.min_unique_classes:
        return False
    small = sum(
        1
        for _, box in annotation.objects
        if area_fraction(box, annotation.dims) < criteria.small_area_fraction
    )
    if small < criteria.min_small_objects:
        return False
    persons = sum(1 for label, _ in annotation.objects if label == criteria.person_label)
    return persons >= criteria.min_persons


def filter_images(
    annotations: list[ImageAnnotation], criteria: FilterCriteria | None = None
) -> list[str]:
    """Ids of images passing every criterion, in input order."""
    criteria = criteria or FilterCriteria()
    return [a.image_id for a in annotations if matches(a, criteria)]


@dataclass
class DatasetStats:
    """Per-label image frequency and symmetric pairwise co-occurrence."""

    frequencies: Counter = field(default_factory=Counter)
    pair_counts: Counter = field(default_factory=Counter)  # keyed by sorted pair

    @property
    def vocabulary(self) -> list[str]:
        return sorted(self.frequencies)

    def frequency(self, label: str) -> int:
        return self.frequencies[label]

    def cooccurrence(self, a: str, b: str) -> int:
        if a == b:
            return self.frequencies[a]
        return self.pair_counts[(min(a, b), max(a, b))]


def annotation_stats(annotations: list[ImageAnnotation]) -> DatasetStats:
    """Count, per label, how many images contain it and each label pair."""
    stats = DatasetStats()
    for annotation in annotations:
        labels = sorted(annotation.labels)
        stats.frequencies.update(labels)
        for i, a in enumerate(labels):
            for b in labels[i + 1 :]:
                stats.pair_counts[(a, b)] += 1
    return stats


def load_coco(path: str | Path) -> list[ImageAnnotation]:
    """Read a COCO-style annotation file (images/annotations/categories).

    Boxes arrive as [x, y, width, height] and are converted to corner form,
    clamped to the image; labels are normalized to lowercase.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    categories = {c["id"]: str(c["name"]).strip().lower() for c in raw["categories"]}
    dims_by_image: dict = {}
    order: list = []
    for img in raw["images"]:
        dims_by_image[img["id"]] = ImageDims(int(img["width"]), int(img["height"]))
        order.append(img["id"])
    objects: dict[object, list[tuple[str, BoundingBox]]] = {i: [] for i in order}
    for ann in raw["annotations"]:
        image_id = ann["image_id"]
        if image_id not in dims_by_image:
            continue
        dims = dims_by_image[image_id]
        x, y, w, h = (float(v) for v in ann["bbox"])
        box = BoundingBox(
            min(max(x, 0.0), float(dims.width)),
            min(max(y, 0.0), float(dims.height)),
            min(max(x + w, 0.0), float(dims.width)),
            min(max(y + h, 0.0), float(dims.height)),
        )
        objects[image_id].append((categories[ann["category_id"]], box))
    return [
        ImageAnnotation(str(i), dims_by_image[i], tuple(objects[i])) for i in order
    ]


def label_sets(annotations: list[ImageAnnotation]) -> dict[str, set[str]]:
    """Per-image ground-truth label sets keyed by image id."""
    return {a.image_id: a.labels for a in annotations}
