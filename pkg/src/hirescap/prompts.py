"""Prompt template rendering and parsing of structured model output."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .geometry import BoundingBox, round_half_away

TEMPLATE_IDS = (
    "initial_caption",
    "key_extract",
    "cooccur",
    "rephrase",
    "pope_judge",
    "pairwise_judge",
    "score_judge",
)

_DEFAULT_DIR = Path(__file__).parent / "templates"


class MissingPlaceholderError(KeyError):
    """A template placeholder was not supplied in the bindings."""


class UnparsableOutputError(ValueError):
    """Model output did not yield any labels under either parsing path."""


class UnparsableVerdictError(ValueError):
    """Judge output contained no recognizable verdict; recorded, never coerced."""


@dataclass(frozen=True)
class ObjectBlock:
    """One detected object formatted for the rewrite prompt."""

    label: str
    region_caption: str
    box: BoundingBox


def render_object_block(block: ObjectBlock) -> str:
    """Format an object as ``label: caption at coordinates (...)``.

    Coordinates are rendered as integers, halves rounded away from zero.
    """
    x0 = round_half_away(block.box.x_min)
    y0 = round_half_away(block.box.y_min)
    x1 = round_half_away(block.box.x_max)
    y1 = round_half_away(block.box.y_max)
    return (
        f"{block.label}: {block.region_caption} at coordinates "
        f"(x_min: {x0}, y_min: {y0}, x_max: {x1}, y_max: {y1})"
    )


class _StrictBindings(dict):
    def __missing__(self, key: str) -> str:
        raise MissingPlaceholderError(key)


def _stringify(value: object) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, ObjectBlock):
        return render_object_block(value)
    if isinstance(value, (list, tuple)):
        if not value:
            return "(none)"
        return "\n".join(_stringify(v) for v in value)
    return str(value)


class PromptLibrary:
    """Loads {placeholder}-style templates from a directory, defaults shipped in-package."""

    def __init__(self, template_dir: str | Path | None = None):
        self.template_dir = Path(template_dir) if template_dir else _DEFAULT_DIR
        self._cache: dict[str, str] = {}

    def body(self, template_id: str) -> str:
        if template_id not in TEMPLATE_IDS:
            raise KeyError(f"unknown template: {template_id}")
        if template_id not in self._cache:
            path = self.template_dir / f"{template_id}.txt"
            self._cache[template_id] = path.read_text(encoding="utf-8").rstrip("\n")
        return self._cache[template_id]

    def render(self, template_id: str, bindings: dict[str, object]) -> str:
        """Substitute bindings into the template; total for complete bindings.

        List values are joined with newlines (ObjectBlocks rendered via
        render_object_block); empty lists render as "(none)".
        """
        prepared = _StrictBindings(
            {key: _stringify(value) for key, value in bindings.items()}
        )
        return self.body(template_id).format_map(prepared)

    def digest(self) -> str:
        """Stable digest over all template bodies, for config compatibility checks."""
        import hashlib

        h = hashlib.sha256()
        for template_id in TEMPLATE_IDS:
            h.update(template_id.encode())
            h.update(b"\x00")
            h.update(self.body(template_id).encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


def render(template_id: str, bindings: dict[str, object]) -> str:
    """Render against the packaged default templates."""
    return PromptLibrary().render(template_id, bindings)


# ---------------------------------------------------------------------------
# Parsing model output

_BULLET_RE = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")
_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL | re.IGNORECASE)


_EDGE_PUNCT_RE = re.compile(r"^[\W_]+|[\W_]+$")


def _normalize_label(raw: str) -> str:
    return _EDGE_PUNCT_RE.sub("", raw.strip()).lower()


def _dedupe(labels: list[str]) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for label in labels:
        if label and label not in seen:
            seen.add(label)
            out.append(label)
    return out


def _try_json_array(text: str) -> list[str] | None:
    candidates = [text.strip()]
    fence = _FENCE_RE.search(text)
    if fence:
        candidates.insert(0, fence.group(1))
    start = text.find("[")
    if start != -1:
        candidates.append(text[start:])
    decoder = json.JSONDecoder()
    for candidate in candidates:
        if not candidate.startswith("["):
            continue
        try:
            parsed, _ = decoder.raw_decode(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, list):
            # A well-formed array wins even when empty; falling through to
            # the text splitter would manufacture labels out of brackets.
            return _dedupe([_normalize_label(v) for v in parsed if isinstance(v, str)])
    return None


def parse_label_list(llm_output: str) -> list[str]:
    """Extract a normalized, deduplicated label list from model output.

    Primary path parses a JSON array of strings; the fallback splits on
    newlines and commas, stripping bullets and numbering.  Labels come back
    lowercase and trimmed, first occurrence kept.
    """
    from_json = _try_json_array(llm_output)
    if from_json is not None:
        if not from_json:
            raise UnparsableOutputError(f"empty label array: {llm_output[:80]!r}")
        return from_json
    pieces: list[str] = []
    for line in llm_output.splitlines():
        line = _BULLET_RE.sub("", line)
        pieces.extend(part for part in line.split(","))
    labels = _dedupe([_normalize_label(p) for p in pieces])
    if not labels:
        raise UnparsableOutputError(f"no labels found in output: {llm_output[:80]!r}")
    return labels


_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_AB_RE = re.compile(
    r"(?i:caption\s+(?P<named>[ab])\b)|(?<![A-Za-z0-9])(?P<bare>[AB])(?![A-Za-z0-9])"
)
_DECIMAL_RE = re.compile(r"\d+\.\d+|\.\d+|\d+")


def parse_judge_verdict(llm_output: str, kind: str) -> str | float:
    """Parse a judge reply; first standalone match wins, never coerced.

    kind "yes_no" returns "yes"/"no"; "a_b" returns "A"/"B"; "score" returns
    the first decimal in [0, 1] as a float.
    """
    if kind == "yes_no":
        match = _YES_NO_RE.search(llm_output)
        if match:
            return match.group(1).lower()
        raise UnparsableVerdictError(f"no yes/no found: {llm_output[:80]!r}")
    if kind == "a_b":
        match = _AB_RE.search(llm_output)
        if match:
            return (match.group("named") or match.group("bare")).upper()
        raise UnparsableVerdictError(f"no A/B found: {llm_output[:80]!r}")
    if kind == "score":
        for match in _DECIMAL_RE.finditer(llm_output):
            value = float(match.group(0))
            if 0.0 <= value <= 1.0:
                return value
        raise UnparsableVerdictError(f"no score in [0,1] found: {llm_output[:80]!r}")
    raise ValueError(f"unknown verdict kind: {kind}")
