"""Run configuration: dataclasses, TOML loading, and key=value overrides.

Every pipeline constant is a config key with its default from the method
description (iou_threshold 0.7, combined_threshold 0.5, the captioning
prompt); overrides apply after file config so experiment sweeps stay
one-liner-friendly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backends import BackendHandle, HttpTransport, MockTransport, ResponseCache
from .fusion import FusionSettings
from .prompts import PromptLibrary

DEFAULT_CAPTION_PROMPT = "Describe this image in detail."


class ConfigError(ValueError):
    """Bad or inconsistent configuration; the CLI maps this to exit code 2."""


@dataclass
class BackendSpec:
    """Where one model role lives and how to talk to it."""

    endpoint: str
    model_id: str
    image_mode: str = "path"  # or "b64"
    detector_id: str = ""
    timeout: float = 60.0
    token_env: str = "HIRESCAP_API_TOKEN"

    def build(self, role: str, cache: ResponseCache | None) -> BackendHandle:
        if self.endpoint.startswith("mock:"):
            transport = MockTransport.from_file(self.endpoint[len("mock:"):])
        else:
            transport = HttpTransport(
                self.endpoint, timeout=self.timeout, token_env=self.token_env
            )
        return BackendHandle(
            role=role,
            model_id=self.model_id,
            transport=transport,
            detector_id=self.detector_id,
            image_mode=self.image_mode,
            cache=cache,
        )


@dataclass(frozen=True)
class EvalSettings:
    """Judge repeat policy and POPE question count."""

    repeats: int = 5
    alternate_order: bool = True
    questions_per_image: int = 6

    def __post_init__(self) -> None:
        if self.repeats < 1 or self.questions_per_image < 1:
            raise ValueError("repeats and questions_per_image must be >= 1")


@dataclass
class PipelineConfig:
    """Everything one pipeline run depends on."""

    captioner: BackendSpec
    chat: BackendSpec
    detectors: list[BackendSpec]
    fusion: FusionSettings = field(default_factory=FusionSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    crop_padding: float = 0.10
    max_proposals: int = 10
    caption_prompt: str = DEFAULT_CAPTION_PROMPT
    template_dir: str | None = None
    cache_root: str | None = None
    cache_enabled: bool = True
    jobs: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.detectors:
            raise ConfigError("at least one detector must be configured")
        if self.crop_padding < 0:
            raise ConfigError(f"negative crop_padding: {self.crop_padding}")
        for threshold in (self.fusion.iou_threshold, self.fusion.combined_threshold):
            if not 0.0 <= threshold <= 1.0:
                raise ConfigError(f"threshold out of [0,1]: {threshold}")

    def prompt_library(self) -> PromptLibrary:
        return PromptLibrary(self.template_dir)

    def build_cache(self) -> ResponseCache | None:
        if not self.cache_enabled:
            return None
        return ResponseCache(self.cache_root)

    def snapshot(self) -> dict:
        """The semantically relevant part of the config, stored in each record."""
        return {
            "captioner_model": self.captioner.model_id,
            "chat_model": self.chat.model_id,
            "detector_ids": [d.detector_id or d.model_id for d in self.detectors],
            "detector_models": [d.model_id for d in self.detectors],
            "fusion": {
                "iou_threshold": self.fusion.iou_threshold,
                "combined_threshold": self.fusion.combined_threshold,
                "combine_rule": self.fusion.combine_rule,
                "evidence_floor": self.fusion.evidence_floor,
            },
            "crop_padding": self.crop_padding,
            "max_proposals": self.max_proposals,
            "caption_prompt": self.caption_prompt,
            "templates_digest": self.prompt_library().digest(),
            "seed": self.seed,
        }

    def digest(self) -> str:
        encoded = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


@dataclass
class BackendSuite:
    """Constructed handles for one run; share one cache."""

    captioner: BackendHandle
    chat: BackendHandle
    detectors: list[BackendHandle]


def build_suite(cfg: PipelineConfig) -> BackendSuite:
    cache = cfg.build_cache()
    detectors = []
    for i, spec in enumerate(cfg.detectors):
        if not spec.detector_id:
            spec.detector_id = f"detector-{i}"
        detectors.append(spec.build("detector", cache))
    return BackendSuite(
        captioner=cfg.captioner.build("captioner", cache),
        chat=cfg.chat.build("chat", cache),
        detectors=detectors,
    )


def _backend_spec(raw: dict, base_dir: Path, what: str) -> BackendSpec:
    try:
        endpoint = raw["endpoint"]
        model_id = raw["model_id"]
    except KeyError as exc:
        raise ConfigError(f"{what} backend missing {exc.args[0]}") from exc
    if endpoint.startswith("mock:"):
        fixture = Path(endpoint[len("mock:"):])
        if not fixture.is_absolute():
            fixture = base_dir / fixture
        if not fixture.exists():
            raise ConfigError(f"{what} mock fixture not found: {fixture}")
        endpoint = f"mock:{fixture}"
    return BackendSpec(
        endpoint=endpoint,
        model_id=model_id,
        image_mode=raw.get("image_mode", "path"),
        detector_id=raw.get("id", ""),
        timeout=float(raw.get("timeout", 60.0)),
        token_env=raw.get("token_env", "HIRESCAP_API_TOKEN"),
    )


def _coerce(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            continue
    return text


def parse_overrides(pairs: list[str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value: {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = _coerce(value.strip())
    return out


def load_config(path: str | Path, overrides: list[str] | None = None) -> PipelineConfig:
    """Parse a TOML config file and apply --override pairs on top."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc

    for key, value in parse_overrides(overrides or []).items():
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-table value")
        node[parts[-1]] = value

    base_dir = path.parent
    backends_raw = raw.get("backends", {})
    if "captioner" not in backends_raw or "chat" not in backends_raw:
        raise ConfigError("config must define backends.captioner and backends.chat")
    detectors_raw = backends_raw.get("detectors", [])
    if not detectors_raw:
        raise ConfigError("config must define at least one [[backends.detectors]]")

    template_dir = raw.get("template_dir")
    if template_dir is not None and not Path(template_dir).is_absolute():
        template_dir = str(base_dir / template_dir)

    try:
        fusion_raw = raw.get("fusion", {})
        fusion = FusionSettings(
            iou_threshold=float(fusion_raw.get("iou_threshold", 0.7)),
            combined_threshold=float(fusion_raw.get("combined_threshold", 0.5)),
            combine_rule=fusion_raw.get("combine_rule", "mean"),
            evidence_floor=float(fusion_raw.get("evidence_floor", 0.05)),
            detector_jobs=int(fusion_raw.get("detector_jobs", 3)),
        )
        eval_raw = raw.get("evaluation", {})
        evaluation = EvalSettings(
            repeats=int(eval_raw.get("repeats", 5)),
            alternate_order=bool(eval_raw.get("alternate_order", True)),
            questions_per_image=int(eval_raw.get("questions_per_image", 6)),
        )
        return PipelineConfig(
            captioner=_backend_spec(backends_raw["captioner"], base_dir, "captioner"),
            chat=_backend_spec(backends_raw["chat"], base_dir, "chat"),
            detectors=[
                _backend_spec(d, base_dir, f"detector[{i}]")
                for i, d in enumerate(detectors_raw)
            ],
            fusion=fusion,
            evaluation=evaluation,
            crop_padding=float(raw.get("crop_padding", 0.10)),
            max_proposals=int(raw.get("max_proposals", 10)),
            caption_prompt=raw.get("caption_prompt", DEFAULT_CAPTION_PROMPT),
            template_dir=template_dir,
            cache_root=raw.get("cache_root"),
            cache_enabled=bool(raw.get("cache_enabled", True)),
            jobs=int(raw.get("jobs", 1)),
            seed=int(raw.get("seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
