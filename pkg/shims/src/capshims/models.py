"""Model adapters behind the three shim roles.

Two families:

* Hermetic reference models (``color-detector``, ``color-captioner``,
  ``rule-chat``) that compute deterministically over the actual request -
  pixel thresholding for vision, text rules for chat. They need no weights
  or network and exist so the whole serving stack can be exercised end to
  end on any machine.
* ``hf:``-prefixed adapters that wrap transformers pipelines
  (zero-shot-object-detection, image-to-text, text-generation) when weights
  are available. Loading failures surface at startup, by design.

All adapters are stateless between requests.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_LABEL_COLORS: dict[str, list[int]] = {
    "table": [139, 90, 43],
    "chair": [120, 30, 30],
    "lamp": [240, 160, 30],
    "umbrella": [120, 40, 140],
    "person": [230, 190, 150],
    "cup": [40, 90, 200],
}

DEFAULT_VOCABULARY = [
    "table", "chair", "umbrella", "lamp", "person", "cup", "books",
    "car", "dog", "tree", "window", "plate", "cushion", "rug",
]

DEFAULT_COOCCURRENCE: dict[str, list[str]] = {
    "table": ["lamp", "books", "cup"],
    "chair": ["cushion", "table"],
    "person": ["cup", "chair"],
    "car": ["tree", "person"],
    "umbrella": ["person"],
}

PALETTE = {
    "red": (200, 40, 40),
    "orange": (240, 150, 40),
    "yellow": (230, 220, 60),
    "green": (60, 170, 70),
    "blue": (50, 90, 200),
    "purple": (130, 50, 150),
    "brown": (140, 90, 45),
    "black": (15, 15, 15),
    "white": (245, 245, 245),
    "gray": (128, 128, 128),
}


class ModelLoadError(RuntimeError):
    """The configured model cannot be constructed; fatal at startup."""


@dataclass
class ShimConfig:
    """One shim service instance."""

    role: str
    model: str
    port: int = 8080
    host: str = "127.0.0.1"
    device: str = "cpu"
    max_batch: int = 8
    model_config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.role not in ("captioner", "chat", "detector"):
            raise ValueError(f"unknown role: {self.role}")
        if not 0 < self.port < 65536:
            raise ValueError(f"invalid port: {self.port}")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")


def _color_mask(pixels: np.ndarray, color: list[int], tolerance: int) -> np.ndarray:
    target = np.asarray(color, dtype=np.int16)
    return (np.abs(pixels.astype(np.int16) - target) <= tolerance).all(axis=-1)


def _article(noun: str) -> str:
    return "an" if noun[:1] in "aeiou" else "a"


class ColorRegionDetector:
    """Finds one axis-aligned box per requested label by color thresholding.

    Confidence is the fill ratio of matching pixels inside their bounding
    box, so a solid painted rectangle scores near 1.0 and scattered noise
    scores low. Pixel coordinates are those of the image as received.
    """

    def __init__(self, config: dict | None = None):
        config = config or {}
        self.label_colors = config.get("label_colors", DEFAULT_LABEL_COLORS)
        self.tolerance = int(config.get("tolerance", 30))

    def detect(self, image: Image.Image, labels: list[str]) -> list[dict]:
        pixels = np.asarray(image.convert("RGB"))
        out = []
        for label in labels:
            color = self.label_colors.get(label)
            if color is None:
                continue
            mask = _color_mask(pixels, color, self.tolerance)
            if not mask.any():
                continue
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            y0, y1 = int(rows[0]), int(rows[-1]) + 1
            x0, x1 = int(cols[0]), int(cols[-1]) + 1
            fill = float(mask[y0:y1, x0:x1].mean())
            out.append(
                {
                    "label": label,
                    "box": [float(x0), float(y0), float(x1), float(y1)],
                    "confidence": round(min(1.0, fill), 4),
                }
            )
        return out


class ColorRegionCaptioner:
    """Describes an image by naming the color-mapped objects it contains.

    Falls back to naming the dominant palette tone when nothing mapped is
    visible, which is what happens on zoom-in crops of objects this
    captioner does not know.
    """

    def __init__(self, config: dict | None = None):
        config = config or {}
        self.label_colors = config.get("label_colors", DEFAULT_LABEL_COLORS)
        self.tolerance = int(config.get("tolerance", 30))

    def _present_labels(self, pixels: np.ndarray) -> list[tuple[str, int]]:
        found = []
        for label, color in self.label_colors.items():
            count = int(_color_mask(pixels, color, self.tolerance).sum())
            if count > 0:
                found.append((label, count))
        found.sort(key=lambda pair: (-pair[1], pair[0]))
        return found

    def _dominant_tone(self, pixels: np.ndarray) -> str:
        flat = pixels.reshape(-1, 3).astype(np.int32)
        names = list(PALETTE)
        centers = np.asarray([PALETTE[n] for n in names], dtype=np.int32)
        nearest = np.argmin(
            ((flat[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1), axis=1
        )
        counts = np.bincount(nearest, minlength=len(names))
        ranked = sorted(zip(names, counts), key=lambda pair: -pair[1])
        colorful = [
            (name, count)
            for name, count in ranked
            if name not in ("white", "gray") and count >= 0.05 * len(flat)
        ]
        return colorful[0][0] if colorful else ranked[0][0]

    def caption(self, image: Image.Image, prompt: str) -> str:
        pixels = np.asarray(image.convert("RGB"))
        found = self._present_labels(pixels)
        if not found:
            tone = self._dominant_tone(pixels)
            return f"A close-up region dominated by {tone} tones."
        names = [f"{_article(label)} {label}" for label, _ in found]
        if len(names) == 1:
            listing = names[0]
        elif len(names) == 2:
            listing = f"{names[0]} and {names[1]}"
        else:
            listing = ", ".join(names[:-1]) + f", and {names[-1]}"
        return f"An image showing {listing}."


class RuleChat:
    """Deterministic text model covering the engine's chat uses.

    Recognizes the default prompt structures: key-object extraction (scans
    the caption for vocabulary words), co-occurrence proposal (static
    lookup table), caption rewriting (drops removed labels, appends one
    sentence per new object), and yes/no caption polling (substring test).
    """

    def __init__(self, config: dict | None = None):
        config = config or {}
        self.vocabulary = config.get("vocabulary", DEFAULT_VOCABULARY)
        self.cooccurrence = config.get("cooccurrence", DEFAULT_COOCCURRENCE)

    def reply(self, messages: list[dict]) -> str:
        text = "\n".join(m.get("text", "") for m in messages)
        if "Answer with a single word" in text:
            return self._poll(text)
        if "Initial caption:" in text:
            return self._rewrite(text)
        if "Reply with a JSON array" in text and "Caption:" in text:
            return self._extract(text)
        if "Reply with a JSON array" in text:
            return self._propose(text)
        return "I can extract objects, propose co-occurring ones, rewrite captions, and answer yes/no questions."

    def _extract(self, text: str) -> str:
        caption = text.split("Caption:", 1)[1].split("Reply with", 1)[0].lower()
        words = set(re.findall(r"[a-z]+", caption))
        found = [label for label in self.vocabulary if label in words]
        return json.dumps(found)

    def _propose(self, text: str) -> str:
        listed = set()
        block = text.split("identified in an image:", 1)[-1].split("Using common-sense", 1)[0]
        listed.update(re.findall(r"[a-z]+", block.lower()))
        proposals: list[str] = []
        for anchor in self.vocabulary:
            if anchor not in listed:
                continue
            for related in self.cooccurrence.get(anchor, []):
                if related not in listed and related not in proposals:
                    proposals.append(related)
        return json.dumps(proposals)

    def _rewrite(self, text: str) -> str:
        initial = text.split("Initial caption:", 1)[1].split("Newly detected objects", 1)[0].strip()
        removed_block = text.split("Objects to remove.", 1)[-1].split("Integrate", 1)[0]
        removed = [
            line.strip().lower()
            for line in removed_block.splitlines()
            if line.strip() and ":" not in line and "(none)" not in line
        ]
        blocks_raw = text.split("of the full image:", 1)[-1].split("Objects to remove.", 1)[0]
        additions = []
        for line in blocks_raw.splitlines():
            match = re.match(r"\s*([a-z][a-z -]*): (.*) at coordinates", line)
            if match:
                label, description = match.group(1), match.group(2).rstrip(".")
                additions.append(
                    f"There is also {_article(label)} {label}: {description}."
                )
        caption = initial
        for label in removed:
            caption = re.sub(
                rf"\b(?:a|an|the)\s+{re.escape(label)}\b", "", caption, flags=re.IGNORECASE
            )
            caption = re.sub(rf"\b{re.escape(label)}\b", "", caption, flags=re.IGNORECASE)
        caption = re.sub(r"\s{2,}", " ", caption)
        caption = re.sub(r"\s+([,.])", r"\1", caption)
        caption = re.sub(r",\s*(?:and\s*)?([,.])", r"\1", caption)
        caption = re.sub(r",\s*and\s*\.", ".", caption)
        caption = caption.replace(", .", ".").strip()
        if additions:
            caption = caption.rstrip(".") + ". " + " ".join(additions)
        return caption

    def _poll(self, text: str) -> str:
        caption = text.split("Caption:", 1)[1].split("Question:", 1)[0].lower()
        question = text.split("Question:", 1)[1].lower()
        match = re.search(r"is there an? ([a-z -]+) in the image", question)
        if not match:
            return "no"
        label = match.group(1).strip()
        return "yes" if re.search(rf"\b{re.escape(label)}\b", caption) else "no"


# ---------------------------------------------------------------------------
# transformers-backed adapters (optional; fail loudly at startup without weights)


class HfDetector:
    def __init__(self, model_id: str, device: str = "cpu", config: dict | None = None):
        try:
            from transformers import pipeline

            self.pipe = pipeline(
                "zero-shot-object-detection", model=model_id, device=device
            )
        except Exception as exc:
            raise ModelLoadError(f"cannot load detector {model_id!r}: {exc}") from exc
        self.threshold = float((config or {}).get("threshold", 0.1))

    def detect(self, image: Image.Image, labels: list[str]) -> list[dict]:
        results = self.pipe(image, candidate_labels=labels, threshold=self.threshold)
        out = []
        for hit in results:
            box = hit["box"]
            out.append(
                {
                    "label": str(hit["label"]).strip().lower(),
                    "box": [
                        float(box["xmin"]),
                        float(box["ymin"]),
                        float(box["xmax"]),
                        float(box["ymax"]),
                    ],
                    "confidence": max(0.0, min(1.0, float(hit["score"]))),
                }
            )
        return out


class HfCaptioner:
    def __init__(self, model_id: str, device: str = "cpu", config: dict | None = None):
        try:
            from transformers import pipeline

            self.pipe = pipeline("image-to-text", model=model_id, device=device)
        except Exception as exc:
            raise ModelLoadError(f"cannot load captioner {model_id!r}: {exc}") from exc

    def caption(self, image: Image.Image, prompt: str) -> str:
        result = self.pipe(image)
        return str(result[0]["generated_text"]).strip()


class HfChat:
    def __init__(self, model_id: str, device: str = "cpu", config: dict | None = None):
        try:
            from transformers import pipeline

            self.pipe = pipeline("text-generation", model=model_id, device=device)
        except Exception as exc:
            raise ModelLoadError(f"cannot load chat model {model_id!r}: {exc}") from exc

    def reply(self, messages: list[dict]) -> str:
        prompt = "\n".join(m.get("text", "") for m in messages)
        result = self.pipe(prompt, max_new_tokens=256, return_full_text=False)
        return str(result[0]["generated_text"]).strip()


def load_model(cfg: ShimConfig):
    """Construct the adapter named by cfg.model for cfg.role."""
    name = cfg.model
    options = dict(cfg.model_config)
    if name.startswith("hf:"):
        model_id = name[len("hf:"):]
        factory = {"detector": HfDetector, "captioner": HfCaptioner, "chat": HfChat}[
            cfg.role
        ]
        return factory(model_id, device=cfg.device, config=options)
    builtin = {
        ("detector", "color-detector"): ColorRegionDetector,
        ("captioner", "color-captioner"): ColorRegionCaptioner,
        ("chat", "rule-chat"): RuleChat,
    }
    factory = builtin.get((cfg.role, name))
    if factory is None:
        raise ModelLoadError(f"no {cfg.role} model named {name!r}")
    return factory(options)


def load_model_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))
