"""Shared shim-test fixtures: painted images and app factories."""

from __future__ import annotations

import base64
import io

import pytest
from PIL import Image, ImageDraw

TABLE_COLOR = (139, 90, 43)
CHAIR_COLOR = (120, 30, 30)
LAMP_COLOR = (240, 160, 30)
UMBRELLA_COLOR = (120, 40, 140)


def paint(size=(640, 480), rects=()):
    img = Image.new("RGB", size, (250, 250, 245))
    draw = ImageDraw.Draw(img)
    for x0, y0, x1, y1, color in rects:
        draw.rectangle((x0, y0, x1, y1), fill=color)
    return img


def to_b64(img: Image.Image) -> str:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


SCENE_RECTS = (
    (300, 200, 600, 430, TABLE_COLOR),
    (50, 250, 150, 400, CHAIR_COLOR),
    (120, 40, 220, 180, LAMP_COLOR),
    (400, 20, 500, 90, UMBRELLA_COLOR),
)


@pytest.fixture
def scene() -> Image.Image:
    return paint(rects=SCENE_RECTS)
