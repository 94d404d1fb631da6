#!/usr/bin/env python3
"""Run the six-stage pipeline end to end on a synthetic scene with mock backends.

Builds a painted test image (table, chair, lamp), wires fixture-backed mock
backends in a temp workspace, runs the engine through the CLI, and prints the
resulting record: the umbrella hallucination is removed, the lamp is found,
zoomed into, and written into the final caption. No network, no models.

Usage: python scripts/run_fixture_demo.py [--keep OUTDIR]
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from PIL import Image, ImageDraw

from hirescap.cli import main as hirescap_main

INITIAL = "A wooden table with a red chair beside it and a large umbrella overhead."
ENHANCED = (
    "A wooden table with a red chair beside it; a brass lamp with a cream shade "
    "stands in the upper left."
)


def build_workspace(root: Path) -> tuple[Path, Path, Path]:
    image = root / "scene.png"
    img = Image.new("RGB", (640, 480), (250, 250, 245))
    draw = ImageDraw.Draw(img)
    draw.rectangle((300, 200, 600, 430), fill=(139, 90, 43))  # table
    draw.rectangle((50, 250, 150, 400), fill=(120, 30, 30))  # chair
    draw.rectangle((120, 40, 220, 180), fill=(240, 160, 30))  # lamp
    img.save(image)

    fixtures = root / "fixtures"
    fixtures.mkdir()
    (fixtures / "captioner.json").write_text(
        json.dumps(
            {
                "caption": {
                    "scene.png": INITIAL,
                    "scene_crop_lamp_110_26_230_194.png": "a brass lamp with a cream shade",
                }
            }
        )
    )
    (fixtures / "chat.json").write_text(
        json.dumps(
            {
                "chat": [
                    {
                        "contains": "List the distinct physical objects",
                        "reply": '["table", "chair", "umbrella"]',
                    },
                    {"contains": "additional physical objects", "reply": '["lamp", "books"]'},
                    {"contains": "Rewrite the image caption", "reply": ENHANCED},
                ]
            }
        )
    )
    detect_tables = [
        {
            "scene.png": {
                "table": [[300, 200, 600, 430, 0.9]],
                "chair": [[50, 250, 150, 400, 0.85]],
                "lamp": [[120, 40, 220, 180, 0.9]],
            }
        },
        {
            "scene.png": {
                "table": [[305, 205, 595, 425, 0.8]],
                "chair": [[52, 252, 148, 398, 0.8]],
                "lamp": [[122, 42, 218, 178, 0.6]],
            }
        },
        {"scene.png": {"table": [[298, 202, 602, 428, 0.7]]}},
    ]
    for i, table in enumerate(detect_tables, start=1):
        (fixtures / f"detector{i}.json").write_text(json.dumps({"detect": table}))

    config = root / "config.toml"
    lines = [
        "cache_enabled = false",
        "[backends.captioner]",
        f'endpoint = "mock:{fixtures / "captioner.json"}"',
        'model_id = "mock-captioner"',
        "[backends.chat]",
        f'endpoint = "mock:{fixtures / "chat.json"}"',
        'model_id = "mock-chat"',
    ]
    for i in (1, 2, 3):
        lines += [
            "[[backends.detectors]]",
            f'id = "d{i}"',
            f'endpoint = "mock:{fixtures / f"detector{i}.json"}"',
            'model_id = "mock-det"',
        ]
    config.write_text("\n".join(lines) + "\n")

    manifest = root / "manifest.txt"
    manifest.write_text("scene.png\n")
    return image, config, manifest


def run(root: Path) -> int:
    image, config, manifest = build_workspace(root)
    out = root / "out"
    code = hirescap_main(
        ["run", "--config", str(config), "--manifest", str(manifest), "--out", str(out)]
    )
    if code != 0:
        print(f"pipeline exited with {code}", file=sys.stderr)
        return code

    record_file = next((out / "records").glob("*.json"))
    record = json.loads(record_file.read_text())
    stages = record["stages"]
    print()
    print(f"record:            {record_file}")
    print(f"initial caption:   {stages['initial_caption']}")
    print(f"key objects:       {stages['key_objects']}")
    print(f"proposed objects:  {stages['proposed_objects']}")
    verification = stages["verification"]
    print(f"confirmed:         {verification['confirmed']}")
    print(f"removed:           {verification['removed']}")
    print(f"newly detected:    {[(n['label'], n['box']) for n in verification['newly_detected']]}")
    for region in stages["region_captions"]:
        print(f"zoom caption:      {region['label']} @ {region['box']}: {region['caption']}")
    print(f"enhanced caption:  {stages['enhanced_caption']}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--keep", metavar="OUTDIR", help="build in OUTDIR instead of a temp dir")
    args = parser.parse_args()
    if args.keep:
        root = Path(args.keep)
        root.mkdir(parents=True, exist_ok=True)
        sys.exit(run(root))
    with tempfile.TemporaryDirectory(prefix="hirescap-demo-") as tmp:
        sys.exit(run(Path(tmp)))
