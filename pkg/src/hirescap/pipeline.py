"""The six-stage caption refinement pipeline, resumable with a full transcript.

Stages: initial caption, key-object extraction, co-occurrence proposal,
ensemble verification, zoom-in recaptioning of newly detected objects, and
the final rewrite.  Stages for one image run strictly in order; across
images a worker pool fans out.  Each image gets one self-contained JSON
record, persisted after every stage so an interrupted run resumes without
repeating work.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from . import backends, fusion
from .config import BackendSuite, PipelineConfig
from .geometry import BoundingBox, ImageDims, expand_and_clamp
from .prompts import ObjectBlock, UnparsableOutputError, parse_label_list

logger = logging.getLogger(__name__)

STAGE_ORDER = (
    "initial_caption",
    "key_objects",
    "proposed_objects",
    "verification",
    "region_captions",
    "enhanced_caption",
)


class StageFailureError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the underlying cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ConfigMismatchError(ValueError):
    """A record was produced under an incompatible config snapshot."""


class CorruptRecordError(ValueError):
    """A record file exists but does not parse as a pipeline record."""


@dataclass
class PipelineRecord:
    """Replayable transcript of one image's run.

    ``stages`` holds the six stage outputs in order of production;
    ``prompts`` keeps every rendered prompt so the run can be audited
    without re-invoking any model.  Timing values live only under
    ``timings`` so records can be compared net of wall-clock noise.
    """

    image: str
    image_digest: str
    dims: tuple[int, int]
    stages: dict = field(default_factory=dict)
    prompts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def is_complete(self) -> bool:
        return all(stage in self.stages for stage in STAGE_ORDER)

    def next_stage(self) -> str | None:
        for stage in STAGE_ORDER:
            if stage not in self.stages:
                return stage
        return None

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "image_digest": self.image_digest,
            "dims": list(self.dims),
            "stages": self.stages,
            "prompts": self.prompts,
            "timings": self.timings,
            "warnings": self.warnings,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineRecord":
        try:
            return cls(
                image=raw["image"],
                image_digest=raw["image_digest"],
                dims=(raw["dims"][0], raw["dims"][1]),
                stages=dict(raw["stages"]),
                prompts=dict(raw.get("prompts", {})),
                timings=dict(raw.get("timings", {})),
                warnings=list(raw.get("warnings", [])),
                config=dict(raw.get("config", {})),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise CorruptRecordError(f"not a pipeline record: {exc}") from exc

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)
            + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: Path) -> "PipelineRecord":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptRecordError(f"record does not parse: {path}") from exc
        return cls.from_dict(raw)


def image_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def record_path(records_dir: Path, image: str | Path) -> Path:
    return records_dir / f"{image_digest(image)}.json"


def _read_dims(image: str | Path) -> ImageDims:
    with Image.open(image) as img:
        width, height = img.size
    return ImageDims(width, height)


def _sanitize(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label).strip("-") or "object"


class _Run:
    """Shared state for executing stages of one image."""

    def __init__(
        self,
        record: PipelineRecord,
        cfg: PipelineConfig,
        suite: BackendSuite,
        crops_dir: Path,
        save_to: Path | None,
    ):
        self.record = record
        self.cfg = cfg
        self.suite = suite
        self.crops_dir = crops_dir
        self.save_to = save_to
        self.library = cfg.prompt_library()
        self.dims = ImageDims(*record.dims)

    def persist(self) -> None:
        if self.save_to is not None:
            self.record.save(self.save_to)

    # -- stage bodies -------------------------------------------------------

    def stage_initial_caption(self) -> None:
        prompt = self.cfg.caption_prompt
        self.record.prompts["initial_caption"] = prompt
        text = backends.caption_image(self.record.image, prompt, self.suite.captioner)
        self.record.stages["initial_caption"] = text

    def stage_key_objects(self) -> None:
        prompt = self.library.render(
            "key_extract", {"caption": self.record.stages["initial_caption"]}
        )
        self.record.prompts["key_extract"] = prompt
        reply = backends.chat_complete([("user", prompt)], self.suite.chat)
        self.record.stages["key_objects"] = parse_label_list(reply)

    def stage_proposed_objects(self) -> None:
        key_objects = self.record.stages["key_objects"]
        prompt = self.library.render(
            "cooccur",
            {"key_objects": key_objects, "max_proposals": self.cfg.max_proposals},
        )
        self.record.prompts["cooccur"] = prompt
        reply = backends.chat_complete([("user", prompt)], self.suite.chat)
        try:
            parsed = parse_label_list(reply)
        except UnparsableOutputError:
            # An empty proposal list is a legitimate (if unhelpful) answer.
            self.record.warnings.append("co-occurrence stage proposed no objects")
            parsed = []
        known = set(key_objects)
        proposals = [p for p in parsed if p not in known][: self.cfg.max_proposals]
        self.record.stages["proposed_objects"] = proposals

    def stage_verification(self) -> None:
        candidates = fusion.CandidateSet.build(
            self.record.stages["key_objects"], self.record.stages["proposed_objects"]
        )
        report = fusion.verify_candidates(
            self.record.image, candidates, self.suite.detectors, self.cfg.fusion
        )
        self.record.warnings.extend(report.warnings)
        self.record.stages["verification"] = report.to_dict(
            evidence_floor=self.cfg.fusion.evidence_floor
        )

    def _zoom_targets(self) -> list[dict]:
        return self.record.stages["verification"]["newly_detected"]

    def stage_region_captions(self) -> None:
        stem = _sanitize(Path(self.record.image).stem.lower())
        entries: list[dict] = []
        with Image.open(self.record.image) as img:
            for target in self._zoom_targets():
                box = BoundingBox(*target["box"])
                crop_box = expand_and_clamp(box, self.cfg.crop_padding, self.dims)
                left = math.floor(crop_box.x_min)
                top = math.floor(crop_box.y_min)
                right = math.ceil(crop_box.x_max)
                bottom = math.ceil(crop_box.y_max)
                name = (
                    f"{stem}_crop_{_sanitize(target['label'])}"
                    f"_{left}_{top}_{right}_{bottom}.png"
                )
                crop_file = self.crops_dir / name
                if not crop_file.exists():
                    self.crops_dir.mkdir(parents=True, exist_ok=True)
                    img.crop((left, top, right, bottom)).save(crop_file)
                caption = backends.caption_image(
                    crop_file, self.cfg.caption_prompt, self.suite.captioner
                )
                entries.append(
                    {
                        "label": target["label"],
                        "box": target["box"],
                        "crop_box": list(crop_box.as_tuple()),
                        "crop_file": name,
                        "caption": caption,
                    }
                )
        self.record.stages["region_captions"] = entries

    def stage_enhanced_caption(self) -> None:
        blocks = [
            ObjectBlock(
                label=entry["label"],
                region_caption=entry["caption"],
                box=BoundingBox(*entry["box"]),
            )
            for entry in self.record.stages["region_captions"]
        ]
        removed = self.record.stages["verification"]["removed"]
        prompt = self.library.render(
            "rephrase",
            {
                "initial_caption": self.record.stages["initial_caption"],
                "object_blocks": blocks,
                "removed_objects": removed,
            },
        )
        self.record.prompts["rephrase"] = prompt
        enhanced = backends.chat_complete([("user", prompt)], self.suite.chat)
        for label in removed:
            if re.search(rf"\b{re.escape(label)}\b", enhanced, re.IGNORECASE):
                self.record.warnings.append(
                    f"removed object {label!r} still appears in the enhanced caption"
                )
        self.record.stages["enhanced_caption"] = enhanced

    # -- driver -------------------------------------------------------------

    def execute_missing(self) -> PipelineRecord:
        bodies = {
            "initial_caption": self.stage_initial_caption,
            "key_objects": self.stage_key_objects,
            "proposed_objects": self.stage_proposed_objects,
            "verification": self.stage_verification,
            "region_captions": self.stage_region_captions,
            "enhanced_caption": self.stage_enhanced_caption,
        }
        for stage in STAGE_ORDER:
            if stage in self.record.stages:
                continue
            started = time.perf_counter()
            try:
                bodies[stage]()
            except Exception as exc:
                self.persist()
                raise StageFailureError(stage, exc) from exc
            self.record.timings[stage] = time.perf_counter() - started
            self.persist()
        return self.record


def run_pipeline(
    image: str | Path,
    cfg: PipelineConfig,
    suite: BackendSuite,
    out_dir: str | Path | None = None,
) -> PipelineRecord:
    """Run all six stages for one image.

    With ``out_dir`` set, the record lands in out_dir/records (named by image
    digest) and crops in out_dir/crops/<digest>; without it, nothing is
    persisted and crops go to a temp directory.
    """
    image = str(image)
    dims = _read_dims(image)
    record = PipelineRecord(
        image=image,
        image_digest=image_digest(image),
        dims=(dims.width, dims.height),
        config=cfg.snapshot(),
    )
    if out_dir is not None:
        out = Path(out_dir)
        save_to = record_path(out / "records", image)
        crops_dir = out / "crops" / record.image_digest
    else:
        save_to = None
        crops_dir = Path(tempfile.mkdtemp(prefix="hirescap-crops-"))
    run = _Run(record, cfg, suite, crops_dir, save_to)
    return run.execute_missing()


def resume(
    record_path_: str | Path,
    cfg: PipelineConfig,
    suite: BackendSuite,
) -> PipelineRecord:
    """Re-execute only the missing stages of a persisted record.

    Completed stages are reused byte-identically; a record produced under a
    different config snapshot is refused.
    """
    path = Path(record_path_)
    record = PipelineRecord.load(path)
    snapshot = cfg.snapshot()
    if record.config != snapshot:
        changed = sorted(
            k
            for k in set(record.config) | set(snapshot)
            if record.config.get(k) != snapshot.get(k)
        )
        raise ConfigMismatchError(
            f"record {path.name} was produced under a different config "
            f"(differs in: {', '.join(changed)})"
        )
    if record.is_complete():
        return record
    crops_dir = path.parent.parent / "crops" / record.image_digest
    run = _Run(record, cfg, suite, crops_dir, path)
    return run.execute_missing()


@dataclass
class BatchResult:
    """Outcome of a manifest run: per-image status plus aggregate counts."""

    records: dict[str, str] = field(default_factory=dict)  # image -> record file
    failures: dict[str, str] = field(default_factory=dict)  # image -> error
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_batch(
    images: list[str],
    cfg: PipelineConfig,
    suite: BackendSuite,
    out_dir: str | Path,
    resume_existing: bool = True,
) -> BatchResult:
    """Process a manifest of images with a bounded worker pool."""
    out = Path(out_dir)
    records_dir = out / "records"
    result = BatchResult()

    def one(image: str) -> tuple[str, PipelineRecord | None, str | None]:
        target = record_path(records_dir, image)
        try:
            if resume_existing and target.exists():
                return image, resume(target, cfg, suite), None
            return image, run_pipeline(image, cfg, suite, out), None
        except Exception as exc:  # collected per item, run continues
            logger.error("pipeline failed for %s: %s", image, exc)
            return image, None, str(exc)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(one, images))
    else:
        outcomes = [one(image) for image in images]

    per_image = {}
    added_total = removed_total = 0
    for image, record, error in outcomes:
        if record is None:
            result.failures[image] = error or "unknown error"
            per_image[image] = {"status": "failed", "error": error}
            continue
        result.records[image] = str(record_path(records_dir, image))
        verification = record.stages.get("verification", {})
        added = len(verification.get("newly_detected", []))
        removed = len(verification.get("removed", []))
        added_total += added
        removed_total += removed
        per_image[image] = {
            "status": "ok" if record.is_complete() else "partial",
            "record": record_path(records_dir, image).name,
            "added_objects": added,
            "removed_objects": removed,
            "stage_seconds": record.timings,
            "warnings": record.warnings,
        }
    result.summary = {
        "images": per_image,
        "totals": {
            "images": len(images),
            "completed": len(result.records),
            "failed": len(result.failures),
            "added_objects": added_total,
            "removed_objects": removed_total,
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(
        json.dumps(result.summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return result
