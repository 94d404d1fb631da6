"""Operator entry point: run the pipeline, run evaluations, filter datasets.

Exit codes are the contract for scripts: 0 on success, 1 when some items
hard-failed (per-item errors are in the summary), 2 for bad configuration or
missing inputs.  Stdout is human text; machine artifacts go only to files.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
from pathlib import Path

from . import dataset, evaluation, pipeline
from .backends import BackendError, ResponseCache
from .config import ConfigError, PipelineConfig, build_suite, load_config

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_BAD_CONFIG = 2


def _load_manifest(spec: str) -> list[str]:
    """A manifest is a newline-delimited file of image paths or a directory/glob."""
    path = Path(spec)
    if path.is_dir():
        images = sorted(
            str(p) for p in path.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png")
        )
    elif any(ch in spec for ch in "*?["):
        images = sorted(glob.glob(spec))
    elif path.is_file():
        base = path.parent
        images = []
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            entry = Path(line)
            images.append(str(entry if entry.is_absolute() else base / entry))
    else:
        raise ConfigError(f"manifest not found: {spec}")
    if not images:
        raise ConfigError(f"manifest is empty: {spec}")
    missing = [img for img in images if not Path(img).is_file()]
    if missing:
        raise ConfigError(f"missing images: {', '.join(missing[:5])}")
    return images


def _load_annotations(path: str):
    if not Path(path).is_file():
        raise ConfigError(f"annotations not found: {path}")
    try:
        return dataset.load_coco(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"annotations file malformed: {path}: {exc}") from exc


def _load_captions(path: str) -> dict[str, str]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"captions file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"captions file does not parse: {path}: {exc}") from exc
    if not isinstance(raw, dict) or not all(isinstance(v, str) for v in raw.values()):
        raise ConfigError(f"captions file must map image id -> caption: {path}")
    return raw


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config, args.override)
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _write_json(path: Path, payload: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# run


def _print_dry_run(images: list[str], cfg: PipelineConfig) -> None:
    library = cfg.prompt_library()
    print(f"dry run: {len(images)} image(s), no backend will be invoked")
    print(f"stage 1  captioner={cfg.captioner.model_id}  prompt: {cfg.caption_prompt!r}")
    print(f"stage 2  chat={cfg.chat.model_id}  template:")
    print("  " + library.body("key_extract").replace("\n", "\n  "))
    print(f"stage 3  chat={cfg.chat.model_id}  template:")
    print("  " + library.body("cooccur").replace("\n", "\n  "))
    detector_ids = ", ".join(d.detector_id or d.model_id for d in cfg.detectors)
    print(
        f"stage 4  detectors=[{detector_ids}]  iou>={cfg.fusion.iou_threshold}  "
        f"combined>={cfg.fusion.combined_threshold} ({cfg.fusion.combine_rule})"
    )
    print(f"stage 5  crop padding {cfg.crop_padding}, same captioner and prompt")
    print(f"stage 6  chat={cfg.chat.model_id}  template:")
    print("  " + library.body("rephrase").replace("\n", "\n  "))
    for image in images:
        print(f"planned: {image}")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    images = _load_manifest(args.manifest)
    if args.dry_run:
        _print_dry_run(images, cfg)
        return EXIT_OK
    suite = build_suite(cfg)
    result = pipeline.run_batch(images, cfg, suite, args.out, resume_existing=True)
    totals = result.summary["totals"]
    print(
        f"completed {totals['completed']}/{totals['images']} images, "
        f"+{totals['added_objects']} objects added, "
        f"-{totals['removed_objects']} removed"
    )
    for image, error in sorted(result.failures.items()):
        print(f"FAILED {image}: {error}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# evaluations


def _pope_table(rows: list[tuple[str, str, evaluation.ConfusionMetrics]]) -> str:
    header = f"{'POPE':<12} {'captions':<16} {'accuracy':>9} {'precision':>10} {'recall':>8} {'f1':>8}"
    lines = [header, "-" * len(header)]
    for strategy, name, m in rows:
        lines.append(
            f"{strategy:<12} {name:<16} {m.accuracy:>9.4f} {m.precision:>10.4f} "
            f"{m.recall:>8.4f} {m.f1:>8.4f}"
        )
    return "\n".join(lines)


def cmd_eval_pope(args: argparse.Namespace) -> int:
    cfg = _config(args)
    annotations = _load_annotations(args.annotations)
    stats = dataset.annotation_stats(annotations)
    label_sets = dataset.label_sets(annotations)
    caption_sets = {}
    for entry in args.captions:
        name, _, path = entry.rpartition("=")
        name = name or Path(path).stem
        caption_sets[name] = _load_captions(path)

    covered = set(label_sets)
    for name, captions in caption_sets.items():
        covered &= set(captions)
    if not covered:
        raise ConfigError("caption sets cover none of the annotated images")
    if covered != set(label_sets):
        label_sets = {i: label_sets[i] for i in label_sets if i in covered}

    strategies = (
        list(evaluation.STRATEGIES) if args.strategy == "all" else [args.strategy]
    )
    k = args.k or cfg.evaluation.questions_per_image
    suite = build_suite(cfg)
    session = evaluation.JudgeSession(
        suite.chat, repeats=cfg.evaluation.repeats, template_dir=cfg.template_dir
    )

    report: dict = {"k": k, "seed": cfg.seed, "strategies": {}}
    rows = []
    for strategy in strategies:
        questions = evaluation.build_pope_questions(
            label_sets, stats, strategy, k, cfg.seed
        )
        report["strategies"][strategy] = {}
        for name, captions in caption_sets.items():
            result = evaluation.evaluate_pope(captions, questions, session)
            report["strategies"][strategy][name] = {
                "metrics": result.metrics.to_dict(),
                "unparsable": result.unparsable,
                "unparsable_rate": result.unparsable_rate,
                "questions": result.total_questions,
            }
            rows.append((strategy, name, result.metrics))
    _write_json(Path(args.out) / "pope_report.json", report)
    print(_pope_table(rows))
    return EXIT_OK


def cmd_eval_pairwise(args: argparse.Namespace) -> int:
    cfg = _config(args)
    captions_a = _load_captions(args.captions_a)
    captions_b = _load_captions(args.captions_b)
    shared = sorted(set(captions_a) & set(captions_b))
    if not shared:
        raise ConfigError("caption files share no image keys")
    suite = build_suite(cfg)
    session = evaluation.JudgeSession(
        suite.captioner,
        repeats=cfg.evaluation.repeats,
        alternate_order=cfg.evaluation.alternate_order,
        template_dir=cfg.template_dir,
    )
    root = Path(args.images_root)
    per_image = {}
    results = []
    for key in shared:
        image = root / key
        if not image.is_file():
            raise ConfigError(f"image not found: {image}")
        result = evaluation.pairwise_compare(
            image, captions_a[key], captions_b[key], session
        )
        results.append(result)
        per_image[key] = {"verdicts": result.verdicts, "winner": result.winner}
    aggregate = evaluation.winning_rate(results)
    _write_json(
        Path(args.out) / "pairwise_report.json",
        {"aggregate": aggregate, "per_image": per_image},
    )
    print(
        f"A wins {aggregate['wins_a']}/{aggregate['decided']} decided comparisons "
        f"({aggregate['winning_rate_a']:.1%}); B {aggregate['winning_rate_b']:.1%}"
    )
    return EXIT_OK


def cmd_eval_score(args: argparse.Namespace) -> int:
    cfg = _config(args)
    captions = _load_captions(args.captions)
    suite = build_suite(cfg)
    session = evaluation.JudgeSession(
        suite.captioner, repeats=cfg.evaluation.repeats, template_dir=cfg.template_dir
    )
    root = Path(args.images_root)
    scores = {}
    failures = {}
    for key in sorted(captions):
        image = root / key
        if not image.is_file():
            raise ConfigError(f"image not found: {image}")
        try:
            scores[key] = evaluation.quantitative_score(image, captions[key], session)
        except evaluation.AllRepeatsUnparsableError as exc:
            failures[key] = str(exc)
    mean = sum(scores.values()) / len(scores) if scores else 0.0
    _write_json(
        Path(args.out) / "score_report.json",
        {"mean_score": mean, "scores": scores, "failures": failures},
    )
    print(f"mean score {mean:.4f} over {len(scores)} image(s)")
    return EXIT_OK if not failures else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# dataset-filter and cache


def cmd_dataset_filter(args: argparse.Namespace) -> int:
    annotations = _load_annotations(args.annotations)
    try:
        criteria = dataset.FilterCriteria(
            min_unique_classes=args.min_classes,
            min_small_objects=args.min_small_objects,
            small_area_fraction=args.small_area_fraction,
            min_persons=args.min_persons,
            required_dims=(args.width, args.height),
            person_label=args.person_label,
            exact_dims=not args.allow_larger,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    selected = dataset.filter_images(annotations, criteria)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(f"{i}\n" for i in selected), encoding="utf-8")
    print(f"selected {len(selected)}/{len(annotations)} images -> {out}")
    return EXIT_OK


def cmd_cache(args: argparse.Namespace) -> int:
    root = None
    if args.config:
        root = load_config(args.config, args.override).cache_root
    cache = ResponseCache(root)
    if args.action == "stats":
        entries = cache.entries()
        size = sum(p.stat().st_size for p in entries)
        print(f"cache {cache.root}: {len(entries)} entries, {size} bytes")
    elif args.action == "clear":
        removed = cache.clear()
        print(f"cache {cache.root}: removed {removed} entries")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hirescap", description="High-resolution caption refinement engine."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="TOML config file")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable), e.g. fusion.combined_threshold=0.6",
        )
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("run", help="run the six-stage pipeline over a manifest")
    common(p)
    p.add_argument("--manifest", required=True, help="image list file, directory, or glob")
    p.add_argument("--out", required=True, help="output directory for records and summary")
    p.add_argument("--dry-run", action="store_true", help="print prompts and plan, call nothing")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval-pope", help="POPE hallucination polling over captions")
    common(p)
    p.add_argument("--annotations", required=True, help="COCO-style annotation JSON")
    p.add_argument(
        "--captions",
        required=True,
        action="append",
        metavar="[NAME=]PATH",
        help="caption set JSON (image id -> caption), repeatable",
    )
    p.add_argument("--strategy", default="all", choices=("random", "popular", "adversarial", "all"))
    p.add_argument("--k", type=int, default=None, help="questions per image per polarity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_pope)

    p = sub.add_parser("eval-pairwise", help="pairwise caption comparison by a vision judge")
    common(p)
    p.add_argument("--captions-a", required=True)
    p.add_argument("--captions-b", required=True)
    p.add_argument("--images-root", default=".")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_pairwise)

    p = sub.add_parser("eval-score", help="0-1 quantitative caption scoring")
    common(p)
    p.add_argument("--captions", required=True)
    p.add_argument("--images-root", default=".")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_score)

    p = sub.add_parser("dataset-filter", help="select the high-resolution complex-scene subset")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="selected-ids manifest path")
    p.add_argument("--min-classes", type=int, default=15)
    p.add_argument("--min-small-objects", type=int, default=10)
    p.add_argument("--small-area-fraction", type=float, default=0.01)
    p.add_argument("--min-persons", type=int, default=5)
    p.add_argument("--width", type=int, default=3840)
    p.add_argument("--height", type=int, default=2160)
    p.add_argument("--person-label", default="person")
    p.add_argument("--allow-larger", action="store_true", help="accept >= dims, either orientation")
    p.set_defaults(func=cmd_dataset_filter)

    p = sub.add_parser("cache", help="inspect or clear the response cache")
    p.add_argument("action", choices=("stats", "clear"))
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[])
    p.set_defaults(func=cmd_cache)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
