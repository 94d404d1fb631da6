"""Shared fixtures: synthetic images, the lamp/umbrella scenario, mock suites.

The canonical scenario: the captioner sees a table, a chair, and an umbrella;
the chat model extracts those three and proposes a lamp and books; two of the
three detectors find the lamp co-located (0.9 and 0.6, mean exactly 0.5),
everyone finds the table and chair, nobody finds the umbrella or books.
Expected outcome: lamp newly detected, umbrella removed, books unverified.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from PIL import Image, ImageDraw

from hirescap.backends import BackendHandle, MockTransport, ResponseCache
from hirescap.config import BackendSpec, BackendSuite, PipelineConfig

SCENE_RECTS = (
    (300, 200, 600, 430, (139, 90, 43)),  # table
    (50, 250, 150, 400, (120, 30, 30)),  # chair
    (120, 40, 220, 180, (240, 160, 30)),  # lamp
)

INITIAL_CAPTION = (
    "A wooden table with a red chair beside it and a large umbrella overhead."
)
REGION_CAPTION = "a brass lamp with a cream shade"
ENHANCED_CAPTION = (
    "A wooden table with a red chair beside it; a brass lamp with a cream shade "
    "stands in the upper left."
)
LAMP_SEED_BOX = (120, 40, 220, 180)


def make_image(path: Path, size=(640, 480), rects=SCENE_RECTS, background=(250, 250, 245)):
    img = Image.new("RGB", size, background)
    draw = ImageDraw.Draw(img)
    for x0, y0, x1, y1, color in rects:
        draw.rectangle((x0, y0, x1, y1), fill=color)
    img.save(path)
    return path


def scene_fixtures(image_name: str) -> dict:
    """Per-role mock fixture dicts for one scene image."""
    stem = Path(image_name).stem.lower()
    crop_name = f"{stem}_crop_lamp_110_26_230_194.png"
    return {
        "caption": {image_name: INITIAL_CAPTION, crop_name: REGION_CAPTION},
        "chat": [
            {
                "contains": "List the distinct physical objects",
                "reply": '["table", "chair", "umbrella"]',
            },
            {"contains": "additional physical objects", "reply": '["lamp", "books"]'},
            {"contains": "Rewrite the image caption", "reply": ENHANCED_CAPTION},
        ],
        "detect": [
            {
                image_name: {
                    "table": [[300, 200, 600, 430, 0.9]],
                    "chair": [[50, 250, 150, 400, 0.85]],
                    "lamp": [[120, 40, 220, 180, 0.9]],
                }
            },
            {
                image_name: {
                    "table": [[305, 205, 595, 425, 0.8]],
                    "chair": [[52, 252, 148, 398, 0.8]],
                    "lamp": [[122, 42, 218, 178, 0.6]],
                }
            },
            {image_name: {"table": [[298, 202, 602, 428, 0.7]]}},
        ],
    }


def merge_fixtures(*bundles: dict) -> dict:
    merged: dict = {"caption": {}, "chat": [], "detect": [{}, {}, {}]}
    seen_rules = set()
    for bundle in bundles:
        merged["caption"].update(bundle["caption"])
        for rule in bundle["chat"]:
            key = (rule["contains"], rule["reply"])
            if key not in seen_rules:
                seen_rules.add(key)
                merged["chat"].append(rule)
        for i, table in enumerate(bundle["detect"]):
            merged["detect"][i].update(table)
    return merged


def make_config(**overrides) -> PipelineConfig:
    defaults = dict(
        captioner=BackendSpec(endpoint="mock:unused", model_id="mock-captioner"),
        chat=BackendSpec(endpoint="mock:unused", model_id="mock-chat"),
        detectors=[
            BackendSpec(endpoint="mock:unused", model_id="mock-det", detector_id="d1"),
            BackendSpec(endpoint="mock:unused", model_id="mock-det", detector_id="d2"),
            BackendSpec(endpoint="mock:unused", model_id="mock-det", detector_id="d3"),
        ],
        cache_enabled=False,
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


def make_suite(
    cfg: PipelineConfig, bundle: dict, cache: ResponseCache | None = None
) -> BackendSuite:
    """In-process mock suite with inspectable transports."""
    detectors = []
    for spec, table in zip(cfg.detectors, bundle["detect"]):
        detectors.append(
            BackendHandle(
                role="detector",
                model_id=spec.model_id,
                transport=MockTransport({"detect": table}),
                detector_id=spec.detector_id,
                cache=cache,
            )
        )
    return BackendSuite(
        captioner=BackendHandle(
            role="captioner",
            model_id=cfg.captioner.model_id,
            transport=MockTransport({"caption": bundle["caption"]}),
            cache=cache,
        ),
        chat=BackendHandle(
            role="chat",
            model_id=cfg.chat.model_id,
            transport=MockTransport({"chat": bundle["chat"]}),
            cache=cache,
        ),
        detectors=detectors,
    )


class SequenceTransport:
    """Scripted transport: returns queued text replies, repeating the last."""

    def __init__(self, texts: list[str]):
        self.texts = list(texts)
        self.calls = 0

    def request(self, req) -> bytes:
        text = self.texts[min(self.calls, len(self.texts) - 1)]
        self.calls += 1
        return json.dumps({"text": text}).encode("utf-8")


def sequence_handle(role: str, texts: list[str]) -> BackendHandle:
    return BackendHandle(role=role, model_id="scripted", transport=SequenceTransport(texts))


def write_fixture_files(directory: Path, bundle: dict) -> dict:
    """Write one mock fixture file per backend for config-file-driven runs."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    cap = directory / "captioner.json"
    cap.write_text(json.dumps({"caption": bundle["caption"]}), encoding="utf-8")
    paths["captioner"] = cap
    chat = directory / "chat.json"
    chat.write_text(json.dumps({"chat": bundle["chat"]}), encoding="utf-8")
    paths["chat"] = chat
    paths["detectors"] = []
    for i, table in enumerate(bundle["detect"], start=1):
        det = directory / f"detector{i}.json"
        det.write_text(json.dumps({"detect": table}), encoding="utf-8")
        paths["detectors"].append(det)
    return paths


def write_config_file(
    directory: Path,
    fixture_paths: dict,
    cache_root: Path | None = None,
    extra: str = "",
) -> Path:
    lines = [
        "seed = 0",
        "cache_enabled = " + ("true" if cache_root else "false"),
    ]
    if cache_root:
        lines.append(f'cache_root = "{cache_root}"')
    lines += [
        extra,
        "[backends.captioner]",
        f'endpoint = "mock:{fixture_paths["captioner"]}"',
        'model_id = "mock-captioner"',
        "[backends.chat]",
        f'endpoint = "mock:{fixture_paths["chat"]}"',
        'model_id = "mock-chat"',
    ]
    for i, det in enumerate(fixture_paths["detectors"], start=1):
        lines += [
            "[[backends.detectors]]",
            f'id = "d{i}"',
            f'endpoint = "mock:{det}"',
            'model_id = "mock-det"',
        ]
    path = directory / "config.toml"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def scene_image(tmp_path):
    return make_image(tmp_path / "scene.png")


@pytest.fixture
def scene_bundle(scene_image):
    return scene_fixtures(scene_image.name)


@pytest.fixture
def scene_run(scene_image, scene_bundle):
    cfg = make_config()
    return scene_image, cfg, make_suite(cfg, scene_bundle)
