"""Command-line interface.

Subcommands: gen-data, train, restore, eval, ablate. Exit codes: 0 on
success, 1 on usage errors (bad arguments or configuration), 2 on runtime
failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .ablation import ablate
from .config import ConfigError, RunConfig
from .corpus import build_corpus, procedural_clean, save_clean_images
from .degrade import spec_for_task
from .evaluate import evaluate
from .pipeline import restore
from .train import train_stage1, train_stage2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1 here
        raise UsageError(message)


def _parse_splits(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"--splits needs three comma-separated fractions, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise UsageError(f"cannot parse --splits {text!r}") from exc


def cmd_gen_data(args) -> None:
    out = Path(args.out)
    if args.clean_dir:
        clean_dir = Path(args.clean_dir)
    else:
        clean_dir = out / "clean"
        images = procedural_clean(args.count, args.size, args.seed)
        save_clean_images(images, clean_dir)
        print(f"generated {len(images)} procedural clean images in {clean_dir}")
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    if not tasks:
        raise UsageError("--tasks must name at least one task")
    try:
        specs = [spec_for_task(t) for t in tasks]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = build_corpus(clean_dir, specs, out, splits=_parse_splits(args.splits),
                            master_seed=args.seed)
    print(f"wrote {len(manifest.entries)} entries "
          f"({manifest.warnings} unreadable inputs skipped) to {out / 'manifest.jsonl'}")


def cmd_train(args) -> None:
    cfg = RunConfig.from_file(args.config)
    out_dir = Path(args.out)
    if args.stage == 1:
        result = train_stage1(cfg, out_path=out_dir / "stage1.ckpt", resume_path=args.resume)
    else:
        if not args.resume:
            raise UsageError("stage 2 needs --resume pointing at the stage-1 checkpoint")
        result = train_stage2(cfg, args.resume, out_path=out_dir / "stage2.ckpt")
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(f"stage {args.stage}: {len(result.losses)} steps, "
          f"loss {first:.4f} -> {last:.4f}, checkpoint {result.checkpoint_path}")


def cmd_restore(args) -> None:
    out, report = restore(args.input, args.ckpt, task_tag=args.task_tag,
                          steps_override=args.steps, seed=args.seed,
                          reference=args.reference)
    from .corpus import save_image
    save_image(out, args.output)
    msg = f"restored {args.input} -> {args.output}"
    if report is not None:
        msg += f" (PSNR {report.psnr_db:.2f} dB, SSIM {report.ssim:.4f})"
    print(msg)


def cmd_eval(args) -> None:
    report = evaluate(args.ckpt, args.manifest, args.out, split=args.split, seed=args.seed)
    avg = report["average"]
    print(f"evaluated {avg['count']} images ({report['missing']} missing): "
          f"PSNR {avg['psnr_degraded']:.2f} -> {avg['psnr_restored']:.2f} dB; "
          f"reports in {args.out}")


def cmd_ablate(args) -> None:
    cfg = RunConfig.from_file(args.config)
    rows = ablate(cfg, args.out)
    for r in rows:
        print(f"{r['variant']:>20s}  PSNR {r['psnr_restored']:.2f} dB "
              f"(degraded {r['psnr_degraded']:.2f})")


def build_parser() -> _Parser:
    parser = _Parser(prog="unirestore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build a synthetic paired corpus")
    p.add_argument("--clean-dir", default=None,
                   help="directory of clean images (default: generate procedural ones)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--tasks", default="denoise", help="comma-separated task names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64, help="procedural image count")
    p.add_argument("--size", type=int, default=32, help="procedural image size")
    p.add_argument("--splits", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from (stage 2: the stage-1 checkpoint)")
    p.add_argument("--out", default="runs", help="checkpoint output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore a single image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--task-tag", default="none")
    p.add_argument("--steps", type=int, default=None, help="override diffusion step count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", default=None, help="clean reference for metrics")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
