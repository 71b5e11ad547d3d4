"""Command-line entry point: train, eval, flops, export-attention."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .autograd import ConfigError


def _train(args) -> int:
    from .config import load_config
    from .train import train

    cfg = load_config(args.config)
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    result = train(cfg, log=print if args.verbose else None)
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoints[-1]}")
    if result.final_accuracy is not None:
        acc = result.final_accuracy
        print(f"test accuracy: {acc} = {float(acc):.4f}")
    return 0


def _eval(args) -> int:
    from .train import evaluate_checkpoint

    acc = evaluate_checkpoint(args.ckpt, args.data)
    print(f"accuracy {acc} = {float(acc):.4f}")
    return 0


def _flops(args) -> int:
    from .complexity import count_model
    from .config import load_config
    from .models import build

    cfg = load_config(args.config)
    report = count_model(build(cfg.backbone_spec()))
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "complexity.txt").write_text(report.to_text())
    (out_dir / "complexity.csv").write_text(report.to_csv())
    ops = report.total_ops
    print(f"BOPs {report.total_bops}  FLOPs {report.total_flops}  OPs {float(ops):.4e}")
    print(f"q_scale {report.q_scale}  q_cirec {report.q_cirec if report.q_cirec is not None else 'n/a'}")
    print(f"report: {out_dir / 'complexity.txt'}, {out_dir / 'complexity.csv'}")
    return 0


def _export(args) -> int:
    from .export import export_attention

    written = export_attention(args.ckpt, args.images, args.lam, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ir2net", description="Binary networks with information restriction "
                                                                  "and recovery")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None, help="override output_dir from the config")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="CIFAR-10 binary directory, or 'synthetic'")
    p.set_defaults(func=_eval)

    p = sub.add_parser("flops", help="BOPs/FLOPs/OPs report for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="report directory (default: output_dir)")
    p.set_defaults(func=_flops)

    p = sub.add_parser("export-attention", help="write attention maps, masks and masked images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--out", default="attention")
    p.set_defaults(func=_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
