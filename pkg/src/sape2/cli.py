"""Command-line harness: train, eval, visualize-bias, bench, selftest.

Exit codes: 0 success, 1 failed checks, 2 usage or config errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from .bench import bench_bias, write_report
from .config import RunConfig, config_overrides, parse_config
from .selftest import DEFAULT_GOLDEN_DIR, run_selftest
from .train import eval_checkpoint, train_model
from .vit import PE_COMBOS, load_checkpoint
from .visualize import visualize_checkpoint

PE_CHOICES = ["none", "ape", "ape-sin", "rope2d", "cope", "sape2",
              "sape2+ape", "cope+ape", "rope2d+ape"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sape2",
        description="Semantic-aware 2D position encoding: training and analysis tools")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model per config file and flags")
    tr.add_argument("--config", help="flat key = value config file")
    tr.add_argument("--pe", choices=PE_CHOICES, help="position encoding combo")
    tr.add_argument("--sape-mode", choices=["query", "key"], dest="sape_mode")
    tr.add_argument("--bias-sign", choices=["+", "-"], dest="bias_sign",
                    help="add or subtract the positional bias")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int, dest="batch_size")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--depth", type=int)
    tr.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    tr.add_argument("--heads", type=int)
    tr.add_argument("--num-classes", type=int, dest="num_classes")
    tr.add_argument("--precision", choices=["float32", "float64"])
    tr.add_argument("--dataset", choices=["synthetic", "cifar10", "cifar100"])
    tr.add_argument("--data-dir", dest="data_dir")
    tr.add_argument("--out", dest="out_dir")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", choices=["synthetic", "cifar10", "cifar100"],
                    default="synthetic")
    ev.add_argument("--data-dir", dest="data_dir", default=None)
    ev.add_argument("--eval-count", type=int, dest="eval_count", default=1000)
    ev.add_argument("--out", dest="out_dir", default=None)

    vz = sub.add_parser("visualize-bias",
                        help="render per-patch bias maps from a checkpoint")
    vz.add_argument("--checkpoint", required=True)
    vz.add_argument("--image", required=True, help="PPM image at the model size")
    vz.add_argument("--layer", type=int, default=0)
    vz.add_argument("--head", type=int, default=0)
    vz.add_argument("--patch", type=int, default=None,
                    help="render one patch instead of all")
    vz.add_argument("--scale", type=int, default=1, help="integer upscaling")
    vz.add_argument("--out", dest="out_dir", default="bias-maps")

    bn = sub.add_parser("bench", help="time the bias kernel across grid sizes")
    bn.add_argument("--sizes", default="16,64,256,1024",
                    help="comma-separated square token counts")
    bn.add_argument("--dim", type=int, default=64, help="head dim")
    bn.add_argument("--heads", type=int, default=6)
    bn.add_argument("--batch", type=int, default=8)
    bn.add_argument("--repeats", type=int, default=5)
    bn.add_argument("--threads", type=int, default=1)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--mode", choices=["query", "key"], default="key")
    bn.add_argument("--out", dest="out_path", default="bench.csv")

    st = sub.add_parser("selftest", help="run the oracle and invariant suite")
    st.add_argument("--golden-dir", dest="golden_dir", default=DEFAULT_GOLDEN_DIR)
    return parser


def cmd_train(args) -> int:
    cfg = parse_config(args.config) if args.config else RunConfig()
    cfg = config_overrides(
        cfg, pe=args.pe, sape_mode=args.sape_mode, bias_sign=args.bias_sign,
        seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, depth=args.depth, hidden_dim=args.hidden_dim,
        heads=args.heads, num_classes=args.num_classes, precision=args.precision,
        dataset=args.dataset, data_dir=args.data_dir, out_dir=args.out_dir)
    summary = train_model(cfg)
    print(f"done: eval@1 {summary['eval_top1']:.4f} eval@5 {summary['eval_top5']:.4f} "
          f"-> {summary['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = RunConfig(dataset=args.dataset, data_dir=args.data_dir or "",
                    eval_count=args.eval_count,
                    num_classes=model.cfg.num_classes,
                    image_size=model.cfg.image_size,
                    patch_size=model.cfg.patch_size)
    row = eval_checkpoint(model, cfg)
    line = f"top1 {row['eval_top1']:.4f} top5 {row['eval_top5']:.4f} n {row['count']}"
    print(line)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "eval.csv"), "w", encoding="ascii") as fh:
            fh.write("top1,top5,count\n")
            fh.write(f"{row['eval_top1']:.6f},{row['eval_top5']:.6f},{row['count']}\n")
    return 0


def cmd_visualize_bias(args) -> int:
    written = visualize_checkpoint(args.checkpoint, args.image, args.layer,
                                   args.head, args.out_dir, args.scale, args.patch)
    print(f"wrote {len(written)} maps and bias.csv under {args.out_dir}")
    return 0


def cmd_bench(args) -> int:
    try:
        sizes = tuple(int(s) for s in args.sizes.split(",") if s)
    except ValueError:
        raise ValueError(f"bad --sizes value {args.sizes!r}") from None
    rows, slope = bench_bias(sizes, d_head=args.dim, heads=args.heads,
                             batch=args.batch, repeats=args.repeats,
                             seed=args.seed, threads=args.threads, mode=args.mode)
    for r in rows:
        print(f"N={r.n:5d} ({r.side}x{r.side})  min {r.wall_min * 1e3:9.3f} ms  "
              f"median {r.wall_median * 1e3:9.3f} ms  "
              f"bias mem {r.mem_bias} floats/head ({100.0 * r.mem_bias / r.mem_total:.1f}%)")
    print(f"log-log time slope: {slope:.3f} (threads={args.threads})")
    write_report(args.out_path, rows, slope, args.threads)
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(golden_dir=args.golden_dir)
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "visualize-bias": cmd_visualize_bias,
        "bench": cmd_bench,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
