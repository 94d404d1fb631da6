"""Golden-fixture conformance checks for wire-protocol endpoints.

Replays fixed requests against a live endpoint and validates response
schemas, confidence ranges, and box bounds. Read-only: inference calls only,
never mutates the target.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field

import httpx
from PIL import Image, ImageDraw

ROLE_PATHS = {"captioner": "/v1/caption", "chat": "/v1/chat", "detector": "/v1/detect"}

GOLDEN_LABELS = ["table", "lamp", "person"]
GOLDEN_PROMPT = "Describe this image in detail."


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ConformanceReport:
    role: str
    endpoint: str
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append(Check(name, ok, detail))

    def render(self) -> str:
        lines = [f"conformance {self.role} @ {self.endpoint}: "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for check in self.checks:
            status = "ok  " if check.ok else "FAIL"
            suffix = f" ({check.detail})" if check.detail else ""
            lines.append(f"  [{status}] {check.name}{suffix}")
        return "\n".join(lines)


def golden_image(size=(96, 72)) -> tuple[str, tuple[int, int]]:
    """Small in-memory test image with painted regions, as base64 PNG."""
    img = Image.new("RGB", size, (250, 250, 245))
    draw = ImageDraw.Draw(img)
    draw.rectangle((10, 30, 60, 60), fill=(139, 90, 43))
    draw.rectangle((70, 8, 90, 30), fill=(240, 160, 30))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii"), size


def _golden_request(role: str, model_id: str) -> dict:
    b64, _ = golden_image()
    if role == "captioner":
        return {"image": {"b64": b64, "format": "png"}, "prompt": GOLDEN_PROMPT, "model_id": model_id}
    if role == "chat":
        return {"messages": [{"role": "user", "text": "Reply with a JSON array of lowercase object names.\nCaption:\na table and a lamp\nReply with the JSON array only."}], "model_id": model_id}
    return {"image": {"b64": b64, "format": "png"}, "labels": GOLDEN_LABELS, "model_id": model_id}


def _check_detections(report: ConformanceReport, body: dict, dims: tuple[int, int]) -> None:
    detections = body.get("detections")
    if not isinstance(detections, list):
        report.add("detections list present", False, f"got {type(detections).__name__}")
        return
    report.add("detections list present", True)
    width, height = dims
    for i, hit in enumerate(detections):
        path = f"detections[{i}]"
        label = hit.get("label")
        if label not in GOLDEN_LABELS:
            report.add("labels within requested vocabulary", False, f"{path}.label={label!r}")
            return
        conf = hit.get("confidence")
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            report.add("confidences in [0,1]", False, f"{path}.confidence={conf!r}")
            return
        box = hit.get("box")
        if (
            not isinstance(box, list)
            or len(box) != 4
            or not all(isinstance(v, (int, float)) for v in box)
        ):
            report.add("boxes well-formed", False, f"{path}.box={box!r}")
            return
        x0, y0, x1, y1 = box
        if not (0 <= x0 <= x1 <= width and 0 <= y0 <= y1 <= height):
            report.add("boxes inside image bounds", False, f"{path}.box={box!r}")
            return
    report.add("labels within requested vocabulary", True)
    report.add("confidences in [0,1]", True)
    report.add("boxes well-formed and inside image bounds", True)


def conformance_check(
    endpoint: str,
    role: str,
    model_id: str = "conformance-probe",
    client: httpx.Client | None = None,
) -> ConformanceReport:
    """Validate one endpoint against the wire contract for its role."""
    if role not in ROLE_PATHS:
        raise ValueError(f"unknown role: {role}")
    report = ConformanceReport(role=role, endpoint=endpoint)
    own_client = client is None
    client = client or httpx.Client(timeout=30.0)
    url = endpoint.rstrip("/") + ROLE_PATHS[role]
    try:
        payload = _golden_request(role, model_id)
        try:
            response = client.post(url, json=payload)
        except httpx.HTTPError as exc:
            report.add("connectivity", False, str(exc))
            return report
        report.add("connectivity", True)

        if response.status_code != 200:
            report.add("golden request accepted", False, f"status {response.status_code}")
            return report
        report.add("golden request accepted", True)

        try:
            body = response.json()
        except ValueError:
            report.add("response is JSON", False, response.text[:120])
            return report
        report.add("response is JSON", True)

        if role in ("captioner", "chat"):
            text = body.get("text")
            ok = isinstance(text, str) and len(text.strip()) > 0
            report.add("non-empty text field", ok, "" if ok else f"text={text!r}")
        else:
            _, dims = golden_image()
            _check_detections(report, body, dims)

        # malformed request: missing required fields must 4xx, not crash
        try:
            bad = client.post(url, json={"nonsense": True})
            report.add(
                "malformed request rejected with 4xx",
                400 <= bad.status_code < 500,
                f"status {bad.status_code}",
            )
        except httpx.HTTPError as exc:
            report.add("malformed request rejected with 4xx", False, str(exc))
            return report

        try:
            again = client.post(url, json=payload)
            report.add("service alive after malformed request", again.status_code == 200)
        except httpx.HTTPError as exc:
            report.add("service alive after malformed request", False, str(exc))
    finally:
        if own_client:
            client.close()
    return report
