"""Ensemble verification of candidate objects against multiple detectors.

Detections for one label are clustered across detectors (IoU >= 0.7 to the
cluster seed by default) and each cluster gets a combined confidence: the
mean over all configured detectors of each detector's best member, with
absent detectors contributing 0.  A cluster verifies when that score reaches
the combined threshold (0.5, inclusive).  Candidate labels taken from the
initial caption are removed only when no detector returned any hit for them
at any confidence; proposed labels are added only when some cluster
verifies.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import backends
from .backends import BackendError, BackendHandle
from .geometry import BoundingBox, Detection, DetectionCluster, cluster_boxes

logger = logging.getLogger(__name__)


class AllDetectorsFailedError(BackendError):
    """Every detector in the ensemble failed for this image."""


@dataclass(frozen=True)
class FusionSettings:
    """Thresholds and combination rule for ensemble verification."""

    iou_threshold: float = 0.7
    combined_threshold: float = 0.5
    combine_rule: str = "mean"  # or "sum"
    evidence_floor: float = 0.05  # filters evidence logs only, never removal
    detector_jobs: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold out of [0,1]: {self.iou_threshold}")
        if self.combined_threshold < 0.0:
            raise ValueError(f"negative combined_threshold: {self.combined_threshold}")
        if self.combine_rule not in ("mean", "sum"):
            raise ValueError(f"unknown combine_rule: {self.combine_rule}")


@dataclass(frozen=True)
class CandidateSet:
    """Query vocabulary for one image: caption-extracted plus proposed labels."""

    initial_objects: tuple[str, ...]
    proposed_objects: tuple[str, ...]

    @classmethod
    def build(cls, initial: list[str], proposed: list[str]) -> "CandidateSet":
        initial_unique = _dedupe(initial)
        initial_set = set(initial_unique)
        # Overlapping proposals resolve to the initial list.
        proposed_unique = [p for p in _dedupe(proposed) if p not in initial_set]
        return cls(tuple(initial_unique), tuple(proposed_unique))

    @property
    def vocabulary(self) -> list[str]:
        return list(self.initial_objects) + list(self.proposed_objects)


def _dedupe(labels: list[str]) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for label in labels:
        if label not in seen:
            seen.add(label)
            out.append(label)
    return out


@dataclass(frozen=True)
class NewObject:
    """One verified instance of a label absent from the initial caption."""

    label: str
    box: BoundingBox


@dataclass
class VerificationReport:
    """Partition of the candidate vocabulary by detector evidence.

    ``confirmed`` + ``flagged`` + ``removed`` is exactly the initial objects;
    flagged labels had detections but no verified cluster and stay in the
    caption.  ``newly_detected`` holds one entry per verified cluster of a
    proposed-only label, so a label can appear several times with different
    boxes.
    """

    confirmed: list[str] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    newly_detected: list[NewObject] = field(default_factory=list)
    unverified_proposals: list[str] = field(default_factory=list)
    all_clusters: dict[str, list[DetectionCluster]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, evidence_floor: float = 0.0) -> dict:
        """JSON-ready form; the floor trims noise detections from evidence only."""
        clusters_out: dict[str, list[dict]] = {}
        for label, clusters in self.all_clusters.items():
            rows = []
            for cluster in clusters:
                members = [
                    {
                        "detector_id": m.detector_id,
                        "box": list(m.box.as_tuple()),
                        "confidence": m.confidence,
                    }
                    for m in cluster.members
                    if m.confidence >= evidence_floor
                ]
                rows.append(
                    {
                        "seed_box": list(cluster.seed.box.as_tuple()),
                        "combined_score": cluster.combined_score,
                        "members": members,
                    }
                )
            clusters_out[label] = rows
        return {
            "confirmed": list(self.confirmed),
            "flagged": list(self.flagged),
            "removed": list(self.removed),
            "newly_detected": [
                {"label": n.label, "box": list(n.box.as_tuple())}
                for n in self.newly_detected
            ],
            "unverified_proposals": list(self.unverified_proposals),
            "clusters": clusters_out,
            "warnings": list(self.warnings),
        }


def combine_cluster_score(members: list[Detection], detector_count: int) -> float:
    """Mean over all configured detectors of each detector's best confidence.

    Detectors with no member contribute 0, so the denominator is always the
    configured ensemble size and a lone detection cannot dominate.
    """
    if detector_count < 1:
        raise ValueError("detector_count must be >= 1")
    return _best_sum(members) / detector_count


def _best_sum(members: list[Detection]) -> float:
    # Summed in detector-id order so the result is bit-identical no matter
    # how members arrived.
    best: dict[str, float] = {}
    for det in members:
        if det.confidence > best.get(det.detector_id, -1.0):
            best[det.detector_id] = det.confidence
    return sum(best[k] for k in sorted(best))


def _combined(members: list[Detection], detector_count: int, rule: str) -> float:
    if rule == "sum":
        return _best_sum(members)
    return combine_cluster_score(members, detector_count)


def verify_candidates(
    image: str | Path,
    candidates: CandidateSet,
    detectors: list[BackendHandle],
    settings: FusionSettings | None = None,
) -> VerificationReport:
    """Query every detector once with the full vocabulary and assemble the report.

    A single detector outage degrades the ensemble (denominator unchanged,
    warning recorded); only a total outage raises.
    """
    settings = settings or FusionSettings()
    if not detectors:
        raise ValueError("at least one detector required")
    if not candidates.vocabulary:
        raise ValueError("candidate vocabulary is empty")

    vocabulary = candidates.vocabulary
    per_detector: list[list[Detection] | BackendError] = [None] * len(detectors)  # type: ignore[list-item]

    def query(idx: int) -> None:
        try:
            per_detector[idx] = backends.detect_objects(image, vocabulary, detectors[idx])
        except BackendError as exc:
            per_detector[idx] = exc

    if settings.detector_jobs > 1 and len(detectors) > 1:
        with ThreadPoolExecutor(max_workers=settings.detector_jobs) as pool:
            list(pool.map(query, range(len(detectors))))
    else:
        for idx in range(len(detectors)):
            query(idx)

    detections: list[Detection] = []
    warnings: list[str] = []
    failures = 0
    for handle, result in zip(detectors, per_detector):
        detector_id = handle.detector_id or handle.model_id
        if isinstance(result, BackendError):
            failures += 1
            warnings.append(f"detector {detector_id} failed: {result}")
        else:
            detections.extend(result)
    if failures == len(detectors):
        raise AllDetectorsFailedError(
            f"all {len(detectors)} detectors failed for {image}"
        )
    warnings.sort()

    return assemble_report(
        candidates, detections, detector_count=len(detectors), settings=settings,
        warnings=warnings,
    )


def assemble_report(
    candidates: CandidateSet,
    detections: list[Detection],
    detector_count: int,
    settings: FusionSettings | None = None,
    warnings: list[str] | None = None,
) -> VerificationReport:
    """Pure half of verification: cluster, score, and partition.

    Deterministic for a given detection multiset regardless of arrival order.
    """
    settings = settings or FusionSettings()
    by_label: dict[str, list[Detection]] = {label: [] for label in candidates.vocabulary}
    for det in detections:
        if det.label in by_label:
            by_label[det.label].append(det)

    report = VerificationReport(warnings=list(warnings or []))
    initial_set = set(candidates.initial_objects)

    for label in candidates.vocabulary:
        clusters = cluster_boxes(by_label[label], settings.iou_threshold)
        for cluster in clusters:
            cluster.combined_score = _combined(
                cluster.members, detector_count, settings.combine_rule
            )
        report.all_clusters[label] = clusters
        verified = [
            c
            for c in clusters
            if c.combined_score is not None
            and c.combined_score >= settings.combined_threshold
        ]
        if label in initial_set:
            if verified:
                report.confirmed.append(label)
            elif clusters:
                report.flagged.append(label)
            else:
                report.removed.append(label)
        else:
            if verified:
                for cluster in verified:
                    report.newly_detected.append(NewObject(label, cluster.seed.box))
            else:
                report.unverified_proposals.append(label)
    return report


@dataclass(frozen=True)
class PipelinePartition:
    """What the downstream stages consume from a verification report."""

    zoom_targets: tuple[NewObject, ...]
    removal_list: tuple[str, ...]
    confirmed: tuple[str, ...]


def partition_for_pipeline(report: VerificationReport) -> PipelinePartition:
    """Zoom-in applies only to newly detected objects, one target per cluster."""
    return PipelinePartition(
        zoom_targets=tuple(report.newly_detected),
        removal_list=tuple(report.removed),
        confirmed=tuple(report.confirmed),
    )
