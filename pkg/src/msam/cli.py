"""Command-line entry point.

    msam gen-phantoms --count N --size S --seed K --out DIR
    msam train --config FILE [--paper-scale]
    msam eval --checkpoint PATH --data DIR [--stages N] [--out DIR]
    msam count-params --config FILE [--paper-scale]

Exit status is 0 on success and the error class's ``exit_code`` otherwise.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from msam.config import format_key_values
from msam.errors import MSAMError


def _gen_phantoms(args) -> int:
    from msam.volume_io import generate_phantom_set

    entries = generate_phantom_set(args.count, args.size, args.seed, args.out, args.lesions)
    for e in entries:
        print(f"{e.volume}\t{e.mask}\t{e.foreground_fraction:.6f}")
    return 0


def _train(args) -> int:
    from msam.harness import load_config, train

    model_cfg, cfg = load_config(args.config, paper_scale=args.paper_scale)
    if args.data:
        cfg.data = args.data
    if args.out:
        cfg.report_dir = args.out
    if not cfg.data:
        print("error: no training data (set 'data:' in the config or pass --data)", file=sys.stderr)
        return 2
    report, ckpt = train(cfg, model_cfg)
    print(format_key_values({"checkpoint": ckpt, **report.summary()}), end="")
    return 0


def _eval(args) -> int:
    from msam.harness import evaluate

    report = evaluate(args.checkpoint, args.data, args.stages, args.seed, args.out)
    print("stage\tmean_dsc\tmean_iou")
    for i, (d, j) in enumerate(zip(report.stage_dsc, report.stage_iou), 1):
        print(f"{i}\t{d:.6f}\t{j:.6f}")
    return 0


def _count_params(args) -> int:
    from msam.harness import count_parameters, load_config, set_finetune_mode
    from msam.model import build_model

    model_cfg, cfg = load_config(args.config, paper_scale=args.paper_scale)
    model = set_finetune_mode(build_model(model_cfg), cfg.finetune)
    counts = count_parameters(model)
    print(format_key_values({
        "finetune": cfg.finetune,
        "lora_rank": model_cfg.lora_rank,
        "total": counts.total,
        "tunable": counts.tunable,
        "fraction": counts.fraction,
    }), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msam", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="write synthetic volume/mask pairs and a manifest")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lesions", type=int, default=None, help="lesions per phantom (default: 1 or 2)")
    p.set_defaults(func=_gen_phantoms)

    p = sub.add_parser("train", help="train and write a checkpoint plus report")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--paper-scale", action="store_true", help="128^3 model, 200 epochs, batch 4, 10 stages")
    p.add_argument("--data", help="manifest file or directory (overrides the config)")
    p.add_argument("--out", help="report directory (overrides the config)")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with simulated clicks")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stages", type=int, default=10)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--out", type=Path, default=None, help="report directory")
    p.set_defaults(func=_eval)

    p = sub.add_parser("count-params", help="report total and tunable parameter counts")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=_count_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MSAMError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
