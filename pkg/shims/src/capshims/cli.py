"""capshim: serve a model role over the wire protocol, or check an endpoint."""

from __future__ import annotations

import argparse
import sys

from .conformance import conformance_check
from .models import ModelLoadError, ShimConfig, load_model_config
from .server import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capshim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run one shim service")
    p.add_argument("--role", required=True, choices=("captioner", "chat", "detector"))
    p.add_argument(
        "--model",
        required=True,
        help="color-detector | color-captioner | rule-chat | hf:<model id>",
    )
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--device", default="cpu")
    p.add_argument("--max-batch", type=int, default=8)
    p.add_argument("--model-config", default=None, help="JSON file with model options")

    p = sub.add_parser("check", help="run the conformance suite against an endpoint")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--role", required=True, choices=("captioner", "chat", "detector"))


    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        try:
            cfg = ShimConfig(
                role=args.role,
                model=args.model,
                port=args.port,
                host=args.host,
                device=args.device,
                max_batch=args.max_batch,
                model_config=load_model_config(args.model_config),
            )
            serve(cfg)
        except (ModelLoadError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    report = conformance_check(args.endpoint, args.role)
    print(report.render())
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
