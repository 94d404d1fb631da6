"""Evaluation harness: POPE hallucination polling, pairwise judging, scoring.

POPE asks yes/no questions about object presence against a caption; negatives
come from three samplers (random, popular, adversarial).  Caption quality is
judged by a vision-capable model either pairwise (A/B with order alternation
to cancel position bias) or as a 0-1 score, with the configured number of
repeats averaged.  Unparsable judge replies are recorded and excluded, never
coerced to an answer.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from . import backends
from .dataset import DatasetStats
from .prompts import PromptLibrary, UnparsableVerdictError, parse_judge_verdict

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "popular", "adversarial")


class InsufficientAbsentLabelsError(ValueError):
    """An image has fewer absent labels than the requested questions per image."""


class AllRepeatsUnparsableError(ValueError):
    """Every repeat of a judge call failed to parse."""


@dataclass(frozen=True)
class PopeQuestion:
    """One presence question; negatives name objects absent from the image."""

    image_id: str
    label: str
    expected: str  # "yes" | "no"
    strategy: str

    @property
    def text(self) -> str:
        return f"Is there a {self.label} in the image?"


@dataclass
class JudgeSession:
    """A judge backend plus the repeat/aggregation policy."""

    backend: backends.BackendHandle
    repeats: int = 5
    alternate_order: bool = True
    template_dir: str | None = None

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        self.library = PromptLibrary(self.template_dir)


def build_pope_questions(
    annotations: dict[str, set[str]],
    stats: DatasetStats,
    strategy: str,
    k: int,
    seed: int = 0,
) -> list[PopeQuestion]:
    """Per image: k positive questions plus k strategy-sampled negatives.

    random draws negatives uniformly from the absent vocabulary (seeded,
    per-image); popular takes the k most frequent absent labels; adversarial
    ranks absent labels by total co-occurrence with the image's ground truth.
    Ranking ties break lexicographically, so the ranked strategies do not
    depend on the seed at all.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy: {strategy}")
    if k < 1:
        raise ValueError("k must be >= 1")
    vocabulary = set(stats.vocabulary)
    questions: list[PopeQuestion] = []
    for image_id, present in annotations.items():
        present = set(present)
        absent = sorted(vocabulary - present)
        if len(absent) < k:
            raise InsufficientAbsentLabelsError(
                f"image {image_id}: {len(absent)} absent labels < k={k}"
            )
        rng = random.Random(f"{seed}:{image_id}")
        positives = rng.sample(sorted(present), min(k, len(present)))
        if strategy == "random":
            negatives = rng.sample(absent, k)
        elif strategy == "popular":
            negatives = sorted(absent, key=lambda lb: (-stats.frequency(lb), lb))[:k]
        else:
            negatives = sorted(
                absent,
                key=lambda lb: (-sum(stats.cooccurrence(lb, g) for g in present), lb),
            )[:k]
        for label in positives:
            questions.append(PopeQuestion(image_id, label, "yes", strategy))
        for label in negatives:
            questions.append(PopeQuestion(image_id, label, "no", strategy))
    return questions


def _majority(verdicts: list[str]) -> str:
    counts = Counter(verdicts)
    if not counts:
        return "unparsable"
    (top, top_n), = counts.most_common(1)
    if sum(1 for v in counts.values() if v == top_n) > 1:
        return "unparsable"  # tie between yes and no
    return top


def judge_pope(caption: str, question: PopeQuestion, session: JudgeSession) -> str:
    """Majority yes/no over the session's repeats; ties and noise stay unparsable."""
    if not caption:
        raise ValueError("caption must be non-empty")
    prompt = session.library.render(
        "pope_judge", {"caption": caption, "question": question.text}
    )
    verdicts: list[str] = []
    for i in range(session.repeats):
        reply = backends.chat_complete(
            [("user", prompt)], session.backend, tag=f"repeat-{i}"
        )
        try:
            verdicts.append(str(parse_judge_verdict(reply, "yes_no")))
        except UnparsableVerdictError:
            logger.debug("unparsable POPE reply for %s/%s", question.image_id, question.label)
    return _majority(verdicts)


@dataclass(frozen=True)
class ConfusionMetrics:
    """Confusion counts with the usual derived ratios ("yes" is positive)."""

    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "ConfusionMetrics":
        total = tp + fp + fn + tn
        accuracy = (tp + tn) / total if total else 0.0
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        return cls(tp, fp, fn, tn, accuracy, precision, recall, f1)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def compute_confusion_metrics(answers: list[tuple[str, str]]) -> ConfusionMetrics:
    """Fold (verdict, expected) pairs into counts; inputs must be yes/no only."""
    if not answers:
        raise ValueError("no answers to score")
    tp = fp = fn = tn = 0
    for verdict, expected in answers:
        if verdict not in ("yes", "no") or expected not in ("yes", "no"):
            raise ValueError(f"non-binary answer pair: {(verdict, expected)}")
        if verdict == "yes" and expected == "yes":
            tp += 1
        elif verdict == "yes" and expected == "no":
            fp += 1
        elif verdict == "no" and expected == "yes":
            fn += 1
        else:
            tn += 1
    return ConfusionMetrics.from_counts(tp, fp, fn, tn)


@dataclass
class PopeEvalResult:
    """POPE run outcome: metrics plus the unparsable tally kept separate."""

    metrics: ConfusionMetrics
    unparsable: int
    total_questions: int
    per_question: list[dict] = field(default_factory=list)

    @property
    def unparsable_rate(self) -> float:
        return self.unparsable / self.total_questions if self.total_questions else 0.0


def evaluate_pope(
    captions: dict[str, str],
    questions: list[PopeQuestion],
    session: JudgeSession,
) -> PopeEvalResult:
    """Judge every question against its image's caption and fold the metrics."""
    answers: list[tuple[str, str]] = []
    unparsable = 0
    per_question: list[dict] = []
    for question in questions:
        caption = captions.get(question.image_id)
        if caption is None:
            raise KeyError(f"no caption for image {question.image_id}")
        verdict = judge_pope(caption, question, session)
        per_question.append(
            {
                "image_id": question.image_id,
                "label": question.label,
                "strategy": question.strategy,
                "expected": question.expected,
                "verdict": verdict,
            }
        )
        if verdict == "unparsable":
            unparsable += 1
        else:
            answers.append((verdict, question.expected))
    metrics = (
        compute_confusion_metrics(answers)
        if answers
        else ConfusionMetrics.from_counts(0, 0, 0, 0)
    )
    return PopeEvalResult(metrics, unparsable, len(questions), per_question)


@dataclass
class PairwiseResult:
    """Per-repeat verdicts for one image pair, in caption-A/caption-B terms."""

    verdicts: list[str]  # "A" | "B" | "unparsable"

    @property
    def wins_a(self) -> int:
        return sum(1 for v in self.verdicts if v == "A")

    @property
    def wins_b(self) -> int:
        return sum(1 for v in self.verdicts if v == "B")

    @property
    def decided(self) -> int:
        return self.wins_a + self.wins_b

    @property
    def winner(self) -> str:
        if self.wins_a > self.wins_b:
            return "A"
        if self.wins_b > self.wins_a:
            return "B"
        return "tie"


def pairwise_compare(
    image: str | Path,
    caption_a: str,
    caption_b: str,
    session: JudgeSession,
) -> PairwiseResult:
    """Repeat the A/B judgment, alternating presentation order to cancel
    position bias (odd repeats show the pair flipped and map the reply back)."""
    if not caption_a or not caption_b:
        raise ValueError("both captions must be non-empty")
    verdicts: list[str] = []
    for i in range(session.repeats):
        flipped = session.alternate_order and i % 2 == 1
        first, second = (caption_b, caption_a) if flipped else (caption_a, caption_b)
        prompt = session.library.render(
            "pairwise_judge", {"caption_a": first, "caption_b": second}
        )
        reply = backends.caption_image(image, prompt, session.backend, tag=f"repeat-{i}")
        try:
            raw = str(parse_judge_verdict(reply, "a_b"))
        except UnparsableVerdictError:
            verdicts.append("unparsable")
            continue
        if flipped:
            raw = "B" if raw == "A" else "A"
        verdicts.append(raw)
    return PairwiseResult(verdicts)


def winning_rate(results: list[PairwiseResult]) -> dict:
    """Corpus-level winning rates over all decided individual comparisons."""
    wins_a = sum(r.wins_a for r in results)
    wins_b = sum(r.wins_b for r in results)
    decided = wins_a + wins_b
    return {
        "wins_a": wins_a,
        "wins_b": wins_b,
        "decided": decided,
        "undecided": sum(len(r.verdicts) for r in results) - decided,
        "winning_rate_a": wins_a / decided if decided else 0.0,
        "winning_rate_b": wins_b / decided if decided else 0.0,
    }


def quantitative_score(
    image: str | Path,
    caption: str,
    session: JudgeSession,
) -> float:
    """Mean of the parsed 0-1 scores across repeats."""
    if not caption:
        raise ValueError("caption must be non-empty")
    prompt = session.library.render("score_judge", {"caption": caption})
    scores: list[float] = []
    for i in range(session.repeats):
        reply = backends.caption_image(image, prompt, session.backend, tag=f"repeat-{i}")
        try:
            scores.append(float(parse_judge_verdict(reply, "score")))
        except UnparsableVerdictError:
            continue
    if not scores:
        raise AllRepeatsUnparsableError(f"no parsable score for {image}")
    return sum(scores) / len(scores)


def improvement_percent(base: float, enhanced: float) -> float:
    """Relative change of a score, in percent of the base."""
    if base <= 0:
        raise ValueError(f"base must be positive: {base}")
    return 100.0 * (enhanced - base) / base
