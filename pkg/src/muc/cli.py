"""Command line entry point: ``muc encode|decode|train|eval|info``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bitstream
from .pipeline import PipelineError, decode_file, encode_file, evaluate, load_config, train_all


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=("low", "high"))
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt-dir", dest="ckpt_dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="muc", description="Low-bitrate music codec")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("encode", help="WAV -> .muc")
    _common(p)
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--block-len", dest="block_len", type=int)

    p = sub.add_parser("decode", help=".muc -> WAV")
    _common(p)
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", dest="n_steps", type=int, help="override sampler steps")
    p.add_argument("--guidance", dest="guidance_scale", type=float)

    p = sub.add_parser("train", help="train checkpoints from a corpus manifest")
    _common(p)
    p.add_argument("manifest")
    p.add_argument("--stages", help="comma-separated subset of stage1,stage2,ablation,rvq,vae,flowgen")
    p.add_argument("--overwrite", action="store_true", help="retrain stages whose checkpoints exist")

    p = sub.add_parser("eval", help="objective metrics over a corpus split")
    _common(p)
    p.add_argument("manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="line-delimited JSON report path")
    p.add_argument("--baseline", action="store_true", help="also score random valid codes")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("info", help="dump a .muc header")
    p.add_argument("input")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "info":
            header, _ = bitstream.decode_stream(Path(args.input).read_bytes())
            print(json.dumps(bitstream.describe(header), indent=1))
            return 0
        overrides = {k: getattr(args, k, None) for k in ("preset", "seed", "ckpt_dir", "block_len",
                                                         "n_steps", "guidance_scale")}
        cfg, tcfg = load_config(args.config, **overrides)
        if args.cmd == "encode":
            info = encode_file(args.input, args.out, cfg)
            print(f"{args.out}: {info['n_frames']} frames, {info['payload_bytes']} payload bytes, "
                  f"{info['kbps']:.4f} kbps")
        elif args.cmd == "decode":
            info = decode_file(args.input, args.out, cfg)
            print(f"{args.out}: sampler n_steps={info['n_steps']} guidance={info['guidance_scale']} "
                  f"seed={info['seed']}")
        elif args.cmd == "train":
            stages = args.stages.split(",") if args.stages else None
            timings = train_all(args.manifest, cfg, tcfg, stages, args.overwrite)
            print(json.dumps({k: round(v, 1) for k, v in timings.items()}))
        elif args.cmd == "eval":
            report = evaluate(args.manifest, args.split, cfg, args.out, baseline=args.baseline,
                              limit=args.limit)
            print(json.dumps(report.aggregate, indent=1))
    except PipelineError as exc:
        print(f"muc: {exc}", file=sys.stderr)
        return 2
    except (bitstream.StreamError, ValueError, OSError) as exc:
        print(f"muc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
