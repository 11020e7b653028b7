"""
Command-line front door: one subcommand per pipeline stage.

    latent-bridge gen-data --seed 7 --n 100
    latent-bridge pretrain --steps 500
    latent-bridge train-branch --steps 1000
    latent-bridge train-cn --steps 500 --token-count 64
    latent-bridge generate --decode-steps 64
    latent-bridge eval
    latent-bridge sweep --kind decode-steps --steps 1,8,64

Each subcommand builds an event, calls the stage handler and maps its status code to an exit code.
"""
import argparse
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

from latent_bridge.config import DEFAULT_OUTPUT_DIR, parse_overrides
from latent_bridge.errors import ConfigError

logger = logging.getLogger(__name__)

EXIT_CODES = {200: 0, 400: 2, 404: 1, 500: 1}

Handler = Callable[[Dict[str, Any], Any], Dict[str, Any]]


def _handlers() -> Dict[str, Handler]:
    from functions.evaluate.app import handler as evaluate
    from functions.gen_data.app import handler as gen_data
    from functions.generate.app import handler as generate
    from functions.pretrain.app import handler as pretrain
    from functions.sweep.app import handler as sweep
    from functions.train_branch.app import handler as train_branch
    from functions.train_controlnet.app import handler as train_controlnet

    return {
        "gen-data": gen_data,
        "pretrain": pretrain,
        "train-branch": train_branch,
        "train-cn": train_controlnet,
        "generate": generate,
        "eval": evaluate,
        "sweep": sweep,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-bridge", description="Toy MLLM -> diffusion latent bridge")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML/TOML config (default: $LATENT_BRIDGE_CONFIG)")
    common.add_argument("--out", default=DEFAULT_OUTPUT_DIR, help=f"run directory (default: {DEFAULT_OUTPUT_DIR})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. dims.embed_dim=16)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic shapes dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="training samples (default: config dataset_size)")
    p.add_argument("--n-val", type=int, default=None, help="validation samples (default: config val_size)")

    p = sub.add_parser("pretrain", parents=[common], help="train encoder, base MLLM and backbone, then freeze")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train-branch", parents=[common], help="train the generation branch (masked MSE)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="continue from the saved branch checkpoint")

    p = sub.add_parser("train-cn", parents=[common], help="train the latent ControlNet (flow matching)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--token-count", type=int, default=None, help="bridge tokens (perfect square; default full grid)")
    p.add_argument("--resume", action="store_true", help="continue from the saved ControlNet checkpoint")

    p = sub.add_parser("generate", parents=[common], help="captions -> grids -> images")
    p.add_argument("--decode-steps", type=int, default=None, help="masked-autoregressive steps (default 64)")
    p.add_argument("--inference-steps", type=int, default=None, help="Euler steps (default 28)")
    p.add_argument("--scale", type=float, default=None, help="ControlNet conditioning scale (default 0.7)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="number of validation captions to render")

    p = sub.add_parser("eval", parents=[common], help="metrics for generated and reconstructed images")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("sweep", parents=[common], help="variant table, token-count or decoding-step sweep")
    p.add_argument("--kind", required=True, choices=("variants", "token-count", "decode-steps"))
    p.add_argument("--steps", default=None, help="decoding steps, e.g. 1,8,64")
    p.add_argument("--counts", default=None, help="token counts, e.g. 4,16,64")
    p.add_argument("--variants", default=None, help="comma-separated variant ids")
    p.add_argument("--seeds", default=None, help="comma-separated seeds, e.g. 0,1,2")
    return parser


def build_event(args: argparse.Namespace) -> Dict[str, Any]:
    event: Dict[str, Any] = {"out": args.out, "overrides": parse_overrides(args.overrides)}
    if args.config:
        event["config"] = args.config
    for key, value in vars(args).items():
        if key in ("command", "out", "config", "overrides") or value is None or value is False:
            continue
        event[key] = value
    return event


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand. Exit 0 on success, 2 on bad flags or input, 1 on runtime failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    try:
        event = build_event(args)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"latent-bridge: error: {e}", file=sys.stderr)
        return 2

    result = _handlers()[args.command](event, None)
    status = result["statusCode"]
    body = json.loads(result["body"])
    stream = sys.stdout if status == 200 else sys.stderr
    print(json.dumps(body, indent=2, sort_keys=True), file=stream)
    if status == 400:
        parser.print_usage(sys.stderr)
    return EXIT_CODES.get(status, 1)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(cli_main())
