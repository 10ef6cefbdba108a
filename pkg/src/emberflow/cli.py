"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 runtime error
or a training run flagged as diverged.

EMBERFLOW_THREADS caps the BLAS worker count; it must be applied before
numpy loads, so this module defers all heavy imports until after the cap.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


def _apply_thread_cap():
    cap = os.environ.get("EMBERFLOW_THREADS", "").strip()
    if cap and cap != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the CLI contract says usage errors are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emberflow",
                description="From-scratch CNN pipeline for 48x48 emotion images")
    sub = p.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare", parents=[], help="split a dataset CSV "
                          "into label and pixel files")
    prep.add_argument("--input", required=True, help="FER2013-format CSV")
    prep.add_argument("--outdir", required=True)
    prep.add_argument("--labels", default="labels.csv",
                      help="labels file name (default: %(default)s)")
    prep.add_argument("--pixels", default="pixels.csv",
                      help="pixels file name (default: %(default)s)")

    vis = sub.add_parser("visualize", help="export examples as PGM images")
    vis.add_argument("--input", required=True)
    vis.add_argument("--outdir", required=True)
    vis.add_argument("--limit", type=int, default=None,
                     help="max images to write (default: all)")

    tr = sub.add_parser("train", help="train the 3-block CNN")
    tr.add_argument("--input", required=True)
    tr.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd",
                    help="(default: %(default)s)")
    tr.add_argument("--lr", type=float, default=0.05, help="(default: %(default)s)")
    tr.add_argument("--decay", type=float, default=1e-5, help="(default: %(default)s)")
    tr.add_argument("--batch-size", type=int, default=128, help="(default: %(default)s)")
    tr.add_argument("--epochs", type=int, default=200, help="(default: %(default)s)")
    tr.add_argument("--seed", type=int, default=0, help="(default: %(default)s)")
    tr.add_argument("--train-count", type=int, default=24000,
                    help="positional split point (default: %(default)s)")
    tr.add_argument("--limit-train", type=int, default=None,
                    help="cap the training slice for desk-scale runs")
    tr.add_argument("--limit-val", type=int, default=None,
                    help="cap the validation slice")
    tr.add_argument("--pool-stride", type=int, default=2, choices=(1, 2),
                    help="(default: %(default)s)")
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--metrics", required=True, help="metrics CSV output path")
    tr.add_argument("--curves", default=None, help="optional SVG output path")

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--model", required=True, help="checkpoint path")
    ev.add_argument("--input", required=True)
    ev.add_argument("--train-count", type=int, default=None,
                    help="if set, evaluate only the validation slice")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--tolerance", type=float, default=1e-3,
                    help="(default: %(default)s)")
    gc.add_argument("--seeds", type=int, default=10, help="(default: %(default)s)")
    return p


def _histogram_line(counts) -> str:
    from .data import EMOTIONS
    return " ".join(f"{name}={int(c)}" for name, c in zip(EMOTIONS, counts))


def cmd_prepare(args) -> int:
    from .data import class_histogram, parse_fer_csv, split_label_pixel_files
    ds = parse_fer_csv(args.input)
    os.makedirs(args.outdir, exist_ok=True)
    split_label_pixel_files(ds, os.path.join(args.outdir, args.labels),
                            os.path.join(args.outdir, args.pixels))
    print(f"rows={len(ds)}")
    print(_histogram_line(class_histogram(ds)))
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .data import export_images, parse_fer_csv
    ds = parse_fer_csv(args.input)
    n = export_images(ds, args.outdir, args.limit)
    print(f"images={n}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import parse_fer_csv, train_val_split
    from .layers import ModelConfig
    from .train import TrainConfig, emit_curves, train
    ds = parse_fer_csv(args.input)
    train_set, val_set = train_val_split(ds, args.train_count)
    config = TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs,
        optimizer=args.optimizer, lr=args.lr, decay=args.decay,
        seed=args.seed, limit_train=args.limit_train, limit_val=args.limit_val,
        model=ModelConfig(pool_stride=args.pool_stride))
    config.validate()
    result = train(config, train_set, val_set)
    save_checkpoint(result.checkpoint, args.out)
    emit_curves(result.metrics, args.metrics, args.curves,
                optimizer=args.optimizer)
    last = result.metrics[-1]
    print(f"epochs={args.epochs} optimizer={args.optimizer} "
          f"train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f} "
          f"loss={last.train_loss:.6f}")
    if result.diverged:
        print("run diverged: non-finite loss or gradient encountered",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint, restore
    from .data import parse_fer_csv, train_val_split
    from .train import evaluate
    ckpt = load_checkpoint(args.model)
    model, _, _ = restore(ckpt)
    ds = parse_fer_csv(args.input)
    if args.train_count is not None:
        _, ds = train_val_split(ds, args.train_count)
    loss, acc, confusion = evaluate(model, ds)
    print(f"loss={loss:.6f}")
    print(f"accuracy={acc:.4f}")
    print("confusion (rows=true, cols=predicted):")
    for row in confusion:
        print(" ".join(f"{int(v):6d}" for v in row))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradient_check
    report = gradient_check(seeds=args.seeds)
    ok = True
    for name, err in report.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} [{status}]")
        ok = ok and err < args.tolerance
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "prepare":
            code = cmd_prepare(args)
        elif args.command == "visualize":
            code = cmd_visualize(args)
        elif args.command == "train":
            code = cmd_train(args)
        elif args.command == "evaluate":
            code = cmd_evaluate(args)
        else:
            code = cmd_gradcheck(args)
    except ValueError as exc:
        # config invariant violations are usage errors; data format issues
        # and checkpoint problems are data errors
        from .data import DataError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, DataError) else EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # checkpoint / runtime failures
        from .checkpoint import CheckpointError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, CheckpointError) else EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
