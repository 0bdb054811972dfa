"""Command line entry point: model-bridge <model> [options]."""

from __future__ import annotations

import argparse

from .config import KINDS, BridgeConfig, BridgeError
from .server import serve


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as err:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated floats, got {text!r}") from err


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-bridge",
        description="Serve an image classifier over the newline-delimited "
                    "JSON scoring protocol, with negated-head contrast scores.")
    parser.add_argument("model",
                        help="file:<torchscript archive> or torchvision:<builder name>")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch-size", type=int, default=32,
                        help="cap on images scored in one forward pass")
    parser.add_argument("--mean", type=_float_list, default=None, metavar="M,M,M",
                        help="per-channel normalization mean (default: the "
                             "standard pretrained-checkpoint constants)")
    parser.add_argument("--std", type=_float_list, default=None, metavar="S,S,S")
    parser.add_argument("--kind", choices=list(KINDS), default="logit",
                        help="report raw logits or softmax probabilities")
    parser.add_argument("--keep-bias", action="store_true",
                        help="negate only the head weights, leaving its bias as is")
    parser.add_argument("--tcp", default=None, metavar="HOST:PORT",
                        help="listen on TCP instead of serving stdin/stdout "
                             "(port 0 picks a free port, reported on stderr)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    if args.mean is not None:
        overrides["mean"] = args.mean
    if args.std is not None:
        overrides["std"] = args.std
    try:
        config = BridgeConfig(model=args.model, device=args.device,
                              batch_size=args.batch_size, kind=args.kind,
                              negate_bias=not args.keep_bias, **overrides)
    except BridgeError as err:
        parser.error(str(err))
    return serve(config, tcp=args.tcp)


if __name__ == "__main__":
    raise SystemExit(main())
