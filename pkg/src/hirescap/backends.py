"""Clients for the three external model roles plus replay mocks and a response cache.

Wire protocol (documented in docs/wire-protocol.md): UTF-8 JSON over HTTP POST
to a per-role path, /v1/caption, /v1/chat, /v1/detect.  Images travel either
by file path (local backends) or base64 payload (remote ones), chosen
per-backend.  Mock transports serve fixtures in-process and never touch the
network; both kinds sit behind the same request() surface so the engine code
is identical either way.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx
from PIL import Image

from .geometry import BoundingBox, Detection, ImageDims

logger = logging.getLogger(__name__)

CACHE_ROOT_ENV = "HIRESCAP_CACHE_DIR"
DEFAULT_TOKEN_ENV = "HIRESCAP_API_TOKEN"

ROLE_PATHS = {
    "captioner": "/v1/caption",
    "chat": "/v1/chat",
    "detector": "/v1/detect",
}

RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.1  # seconds; doubles per attempt


class BackendError(Exception):
    """Base for backend failures; carries the request's cache key for diagnosis."""

    def __init__(self, message: str, cache_key: str | None = None):
        super().__init__(message)
        self.cache_key = cache_key


class BackendUnreachable(BackendError):
    """Transport-level failure: connection refused, DNS, reset."""


class BackendTimeout(BackendError):
    """The backend did not answer within the configured timeout."""


class BackendProtocolError(BackendError):
    """Non-success status or a response violating the wire contract."""


# ---------------------------------------------------------------------------
# Cache keys


def _normalize_text(text: str) -> str:
    """Collapse whitespace runs so cosmetically different prompts share a key."""
    return " ".join(text.split())


def _image_identity(image: Any) -> dict[str, str]:
    """Content digest of an image reference; path- and encoding-independent."""
    if isinstance(image, dict) and "b64" in image:
        raw = base64.b64decode(image["b64"])
    else:
        path = image["path"] if isinstance(image, dict) else str(image)
        raw = Path(path).read_bytes()
    return {"sha256": hashlib.sha256(raw).hexdigest()}


def canonical_payload(role: str, payload: dict[str, Any]) -> dict[str, Any]:
    """Normalize a request payload for cache-key hashing.

    Label lists are sorted, prompt/message whitespace collapsed, and image
    references replaced by their content digest.
    """
    out: dict[str, Any] = {}
    for key, value in payload.items():
        if key == "image":
            out[key] = _image_identity(value)
        elif key == "labels":
            out[key] = sorted(value)
        elif key == "prompt":
            out[key] = _normalize_text(value)
        elif key == "messages":
            out[key] = [
                {"role": m["role"], "text": _normalize_text(m["text"])} for m in value
            ]
        else:
            out[key] = value
    return out


def cache_key(role: str, model_id: str, payload: dict[str, Any]) -> str:
    """Hex digest identifying a request; byte-stable across payload re-orderings."""
    canon = {
        "role": role,
        "model_id": model_id,
        "payload": canonical_payload(role, payload),
    }
    encoded = json.dumps(canon, sort_keys=True, ensure_ascii=True, separators=(",", ":"))
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendRequest:
    """One request to an external model role."""

    role: str
    model_id: str
    payload: dict[str, Any]
    key: str = field(init=False)

    def __post_init__(self) -> None:
        if self.role not in ROLE_PATHS:
            raise ValueError(f"unknown role: {self.role}")
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        # computed once: canonicalization digests the image bytes
        object.__setattr__(self, "key", cache_key(self.role, self.model_id, self.payload))


# ---------------------------------------------------------------------------
# Response cache


class ResponseCache:
    """Content-addressed store of raw response bytes, one file per key.

    Writes go through a temp file and os.replace, so concurrent readers never
    see torn entries; a per-process lock serializes writers per key.
    """

    def __init__(self, root: str | Path | None = None):
        env_root = os.environ.get(CACHE_ROOT_ENV)
        self.root = Path(root if root is not None else env_root or ".hirescap-cache")
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / key

    def get(self, key: str) -> bytes | None:
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None

    def put(self, key: str, body: bytes) -> None:
        path = self._path(key)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
            tmp.write_bytes(body)
            os.replace(tmp, path)

    def entries(self) -> list[Path]:
        if not self.root.exists():
            return []
        return sorted(p for p in self.root.glob("*/*") if p.is_file())

    def clear(self) -> int:
        removed = 0
        for path in self.entries():
            path.unlink()
            removed += 1
        return removed


# ---------------------------------------------------------------------------
# Transports


class HttpTransport:
    """POSTs JSON request bodies to a per-role endpoint path."""

    def __init__(
        self,
        base_url: str,
        timeout: float = 60.0,
        token_env: str = DEFAULT_TOKEN_ENV,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.token_env = token_env

    def request(self, req: BackendRequest) -> bytes:
        url = self.base_url + ROLE_PATHS[req.role]
        headers = {"content-type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["authorization"] = f"Bearer {token}"
        body = dict(req.payload)
        body["model_id"] = req.model_id
        try:
            resp = httpx.post(url, json=body, headers=headers, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"timeout calling {url}: {exc}", req.key) from exc
        except httpx.TransportError as exc:
            raise BackendUnreachable(f"cannot reach {url}: {exc}", req.key) from exc
        if resp.status_code != 200:
            raise BackendProtocolError(
                f"{url} returned {resp.status_code}: {resp.text[:200]}", req.key
            )
        return resp.content


class MockTransport:
    """Fixture-backed transport for deterministic offline runs.

    Fixture keys are either full cache-key digests (under ``raw``) or
    human-readable patterns:

    * ``caption``: image basename -> caption text
    * ``detect``:  image basename -> {label: [[x0, y0, x1, y1, confidence], ...]}
    * ``chat``:    ordered rules [{"contains": substring, "reply": text}, ...],
      matched against the concatenated message text, first hit wins

    Counts invocations so tests can assert cache behavior.
    """

    def __init__(self, fixtures: dict[str, Any]):
        self.fixtures = fixtures
        self.calls = 0
        self.requests: list[BackendRequest] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "MockTransport":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def _image_name(self, payload: dict[str, Any]) -> str:
        image = payload.get("image")
        if isinstance(image, dict) and "path" in image:
            return Path(image["path"]).name
        if isinstance(image, str):
            return Path(image).name
        return "<b64>"

    def request(self, req: BackendRequest) -> bytes:
        self.calls += 1
        self.requests.append(req)
        raw = self.fixtures.get("raw", {})
        if req.key in raw:
            return json.dumps(raw[req.key]).encode("utf-8")

        if req.role == "captioner":
            captions = self.fixtures.get("caption", {})
            name = self._image_name(req.payload)
            if name in captions:
                return json.dumps({"text": captions[name]}).encode("utf-8")
            if "*" in captions:
                return json.dumps({"text": captions["*"]}).encode("utf-8")
            raise BackendProtocolError(f"no fixture for image {name!r}", req.key)

        if req.role == "chat":
            text = "\n".join(m["text"] for m in req.payload["messages"])
            for rule in self.fixtures.get("chat", []):
                if rule["contains"] in text:
                    return json.dumps({"text": rule["reply"]}).encode("utf-8")
            raise BackendProtocolError("no chat fixture matched", req.key)

        if req.role == "detector":
            table = self.fixtures.get("detect", {}).get(self._image_name(req.payload), {})
            hits = []
            for label in req.payload["labels"]:
                for x0, y0, x1, y1, conf in table.get(label, []):
                    hits.append(
                        {"label": label, "box": [x0, y0, x1, y1], "confidence": conf}
                    )
            return json.dumps({"detections": hits}).encode("utf-8")

        raise BackendProtocolError(f"unknown role {req.role}", req.key)


# ---------------------------------------------------------------------------
# Backend handles and the three client operations


@dataclass
class BackendHandle:
    """Shareable handle for one configured backend."""

    role: str
    model_id: str
    transport: Any
    detector_id: str = ""
    image_mode: str = "path"  # or "b64"
    cache: ResponseCache | None = None

    def image_ref(self, image: str | Path) -> dict[str, Any]:
        if self.image_mode == "b64":
            raw = Path(image).read_bytes()
            return {
                "b64": base64.b64encode(raw).decode("ascii"),
                "format": Path(image).suffix.lstrip(".") or "png",
            }
        return {"path": str(Path(image).resolve())}


def _execute(handle: BackendHandle, req: BackendRequest) -> bytes:
    """Run one request with caching and retry-on-transport-error."""
    if handle.cache is not None:
        hit = handle.cache.get(req.key)
        if hit is not None:
            return hit
    delay = RETRY_BASE_DELAY
    for attempt in range(RETRY_ATTEMPTS):
        try:
            body = handle.transport.request(req)
            break
        except (BackendUnreachable, BackendTimeout):
            if attempt == RETRY_ATTEMPTS - 1:
                raise
            logger.warning(
                "transport error from %s backend, retrying in %.2fs", req.role, delay
            )
            time.sleep(delay)
            delay *= 2
    if handle.cache is not None:
        handle.cache.put(req.key, body)
    return body


def _parse_json(body: bytes, key: str) -> dict[str, Any]:
    try:
        parsed = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BackendProtocolError(f"response is not JSON: {exc}", key) from exc
    if not isinstance(parsed, dict):
        raise BackendProtocolError("response body is not a JSON object", key)
    return parsed


def _text_field(parsed: dict[str, Any], key: str) -> str:
    text = parsed.get("text")
    if not isinstance(text, str):
        raise BackendProtocolError("response missing string 'text' field", key)
    return text.rstrip()


def caption_image(
    image: str | Path,
    prompt: str,
    backend: BackendHandle,
    tag: str | None = None,
) -> str:
    """Ask a captioner backend to describe an image.

    ``tag`` is an opaque client nonce (e.g. a repeat index) that keeps
    otherwise-identical requests distinct in the cache.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if backend.role != "captioner":
        raise ValueError(f"expected a captioner handle, got {backend.role}")
    payload: dict[str, Any] = {"image": backend.image_ref(image), "prompt": prompt}
    if tag is not None:
        payload["tag"] = tag
    req = BackendRequest("captioner", backend.model_id, payload)
    return _text_field(_parse_json(_execute(backend, req), req.key), req.key)


def chat_complete(
    messages: list[tuple[str, str]],
    backend: BackendHandle,
    tag: str | None = None,
) -> str:
    """Run one chat completion over an ordered (role, text) message list."""
    if not messages:
        raise ValueError("messages must be non-empty")
    if backend.role != "chat":
        raise ValueError(f"expected a chat handle, got {backend.role}")
    payload: dict[str, Any] = {
        "messages": [{"role": role, "text": text} for role, text in messages]
    }
    if tag is not None:
        payload["tag"] = tag
    req = BackendRequest("chat", backend.model_id, payload)
    return _text_field(_parse_json(_execute(backend, req), req.key), req.key)


def _read_dims(image: str | Path) -> ImageDims:
    # PIL reads size from the header without decoding pixel data.
    with Image.open(image) as img:
        width, height = img.size
    return ImageDims(width, height)


def detect_objects(
    image: str | Path,
    labels: list[str],
    backend: BackendHandle,
) -> list[Detection]:
    """Query one detector backend for a batch of labels.

    Returned boxes are clamped to the image dims; an empty list is a valid
    result (absence), while out-of-range confidences or labels outside the
    requested vocabulary are protocol violations.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    for label in labels:
        if label != label.strip().lower():
            raise ValueError(f"label not normalized: {label!r}")
    if backend.role != "detector":
        raise ValueError(f"expected a detector handle, got {backend.role}")

    dims = _read_dims(image)
    payload = {"image": backend.image_ref(image), "labels": list(labels)}
    req = BackendRequest("detector", backend.model_id, payload)
    parsed = _parse_json(_execute(backend, req), req.key)
    raw = parsed.get("detections")
    if not isinstance(raw, list):
        raise BackendProtocolError("response missing 'detections' list", req.key)

    requested = set(labels)
    detections: list[Detection] = []
    for i, entry in enumerate(raw):
        label = entry.get("label")
        box = entry.get("box")
        conf = entry.get("confidence")
        if label not in requested:
            raise BackendProtocolError(
                f"detections[{i}].label {label!r} not in requested labels", req.key
            )
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise BackendProtocolError(
                f"detections[{i}].confidence out of [0,1]: {conf!r}", req.key
            )
        if not isinstance(box, list) or len(box) != 4:
            raise BackendProtocolError(f"detections[{i}].box malformed: {box!r}", req.key)
        x0, y0, x1, y1 = (float(v) for v in box)
        if x0 > x1 or y0 > y1:
            raise BackendProtocolError(f"detections[{i}].box inverted: {box!r}", req.key)
        clamped = BoundingBox(
            min(max(x0, 0.0), float(dims.width)),
            min(max(y0, 0.0), float(dims.height)),
            min(max(x1, 0.0), float(dims.width)),
            min(max(y1, 0.0), float(dims.height)),
        )
        detections.append(
            Detection(
                label=label,
                box=clamped,
                confidence=float(conf),
                detector_id=backend.detector_id or backend.model_id,
            )
        )
    return detections


def decode_image_ref(image: Any) -> Image.Image:
    """Open an image reference (path or base64 payload) as a PIL image."""
    if isinstance(image, dict) and "b64" in image:
        return Image.open(io.BytesIO(base64.b64decode(image["b64"])))
    path = image["path"] if isinstance(image, dict) else str(image)
    return Image.open(path)
