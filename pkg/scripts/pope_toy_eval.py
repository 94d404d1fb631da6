#!/usr/bin/env python3
"""POPE evaluation demo over synthetic annotations with a substring judge.

Generates a toy corpus, builds random/popular/adversarial question sets, and
judges two caption sets against them: an "initial" set that hallucinates one
object per image and an "enhanced" set that does not. The judge is a
deterministic stand-in (answers yes iff the object name appears in the
caption), so the script runs offline and shows the enhanced captions winning
on precision, mirroring how the harness is used with a live judge.

Usage: python scripts/pope_toy_eval.py [--k 2] [--seed 0]
"""

from __future__ import annotations

import argparse
import json
import random

from hirescap.backends import BackendHandle
from hirescap.dataset import DatasetStats, annotation_stats, ImageAnnotation
from hirescap.evaluation import JudgeSession, build_pope_questions, evaluate_pope
from hirescap.geometry import BoundingBox, ImageDims

VOCAB = [
    "person", "car", "dog", "bicycle", "bench", "tree",
    "lamp", "umbrella", "cup", "sign",
]


class SubstringJudge:
    """Wire-compatible chat transport: yes iff the asked object is in the caption."""

    def request(self, req) -> bytes:
        text = "\n".join(m["text"] for m in req.payload["messages"])
        question_line = next(l for l in text.splitlines() if l.startswith("Question:"))
        label = question_line.split("Is there a ", 1)[1].split(" in the image?")[0]
        caption = text.split("Caption:", 1)[1].split("Question:", 1)[0]
        answer = "yes" if label in caption else "no"
        return json.dumps({"text": answer}).encode()


def toy_corpus(seed: int, images: int = 12):
    rng = random.Random(seed)
    annotations = []
    captions_initial = {}
    captions_enhanced = {}
    for i in range(images):
        image_id = f"img{i:02d}"
        present = rng.sample(VOCAB, rng.randint(3, 5))
        objects = tuple(
            (label, BoundingBox(0, 0, 50, 50)) for label in present
        )
        annotations.append(ImageAnnotation(image_id, ImageDims(640, 480), objects))
        hallucinated = rng.choice([v for v in VOCAB if v not in present])
        described = present[:-1]  # the initial caption also misses one real object
        captions_initial[image_id] = (
            f"A scene with {', '.join(described)} and a {hallucinated}."
        )
        captions_enhanced[image_id] = f"A scene with {', '.join(present)}."
    return annotations, captions_initial, captions_enhanced


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--k", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    annotations, initial, enhanced = toy_corpus(args.seed)
    stats = annotation_stats(annotations)
    label_sets = {a.image_id: a.labels for a in annotations}
    session = JudgeSession(
        BackendHandle("chat", "substring-judge", SubstringJudge()), repeats=1
    )

    header = f"{'POPE':<12} {'captions':<10} {'accuracy':>9} {'precision':>10} {'recall':>8} {'f1':>8}"
    print(header)
    print("-" * len(header))
    for strategy in ("random", "popular", "adversarial"):
        questions = build_pope_questions(label_sets, stats, strategy, args.k, args.seed)
        for name, captions in (("initial", initial), ("enhanced", enhanced)):
            result = evaluate_pope(captions, questions, session)
            m = result.metrics
            print(
                f"{strategy:<12} {name:<10} {m.accuracy:>9.4f} {m.precision:>10.4f} "
                f"{m.recall:>8.4f} {m.f1:>8.4f}"
            )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
