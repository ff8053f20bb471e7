"""Command-line entry point: gen-data, train, compete, predict, evaluate, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, default_config, format_config, load_config
from .data import VolumeCase, read_volume, write_volume
from .experiment import (VOLUME_SUFFIX, evaluate_pairs, generate_dataset, load_dataset, partition,
                         predict_volume, run_compete, run_train, write_dataset)
from .gradcheck import TOLERANCE, run_suite
from .network import load_checkpoint, write_checkpoint
from .training import write_history_csv, write_stage_log_csv

log = logging.getLogger("pyrseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here are exit 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _size(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DX,DY,DZ integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers DX,DY,DZ, got {text!r}")
    return dims


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pyrseg", description="Pyramid segmentation network with OHNEM loss and competitive training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=_positive, default=_cores(),
                   help="worker threads for competitors and per-case evaluation (default: available cores)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write synthetic phantom volumes")
    g.add_argument("--count", type=_positive, required=True)
    g.add_argument("--size", type=_size, default=(64, 64, 16), help="DX,DY,DZ (default 64,64,16)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    for name, text in (("train", "train one model, keep the checkpoint with the lowest validation loss"),
                       ("compete", "competitive training; keep the overall winner")):
        t = sub.add_parser(name, help=text)
        t.add_argument("--config", type=Path, help="key = value config file (default: built-in defaults)")
        t.add_argument("--data", type=Path, required=True, help=f"directory of {VOLUME_SUFFIX} volumes")
        t.add_argument("--out", type=Path, required=True)

    pr = sub.add_parser("predict", help="segment one volume")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--volume", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True)
    pr.add_argument("--config", type=Path, help="default: config.txt next to the checkpoint")

    e = sub.add_parser("evaluate", help="score predicted label volumes against ground truth, matched by file name")
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--config", type=Path, help="only the metrics.* keys are used")

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    return p


def _config(path: Path | None) -> RunConfig:
    return load_config(path) if path is not None else default_config()


def _echo(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg), encoding="utf-8")


def cmd_gen_data(args) -> int:
    cases = generate_dataset(args.count, args.size, args.seed)
    paths = write_dataset(cases, args.out)
    (args.out / "dataset.txt").write_text(
        f"count = {args.count}\nsize = {','.join(map(str, args.size))}\nseed = {args.seed}\n", encoding="utf-8")
    print(f"wrote {len(paths)} volumes to {args.out}")
    return EXIT_OK


def _write_split(part, path: Path) -> None:
    rows = ["id,subset"]
    for subset in ("train", "validation", "test"):
        rows += [f"{c.id},{subset}" for c in getattr(part, subset)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def cmd_train(args, compete: bool) -> int:
    cfg = _config(args.config)
    if compete and cfg.cts.num_competitors < 2:
        raise ConfigError("cts.num_competitors must be >= 2 for compete")
    part = partition(load_dataset(args.data), cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, args.out / "config.txt")
    _write_split(part, args.out / "split.csv")
    t0 = time.perf_counter()
    if compete:
        result = run_compete(cfg, part, args.threads)
        best = result.winner
        write_checkpoint(best, args.out / "winner.segc")
        write_stage_log_csv(result.stage_log, args.out / "stage_log.csv")
        for i, hist in enumerate(result.histories):
            write_history_csv(hist, args.out / f"history_competitor{i}.csv")
    else:
        best, history = run_train(cfg, part)
        write_checkpoint(best, args.out / "best.segc")
        write_history_csv(history, args.out / "history.csv")
    print(f"best validation loss {best.val_loss:.6f} at epoch {best.epoch} "
          f"({time.perf_counter() - t0:.1f}s); outputs in {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg_path = args.config or args.checkpoint.parent / "config.txt"
    if not cfg_path.is_file():
        raise ConfigError(f"no config given and {cfg_path} does not exist")
    cfg = load_config(cfg_path)
    model = load_checkpoint(args.checkpoint, cfg.network)
    case = read_volume(args.volume)
    label = predict_volume(model, case, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(VolumeCase(case.image, label, case.spacing, case.id), args.out)
    _echo(cfg, args.out.parent / "predict_config.txt")
    print(f"{args.out}: {int(label.sum())} foreground voxels")
    return EXIT_OK


def _label_of(path: Path) -> VolumeCase | None:
    return read_volume(path) if path.is_file() else None


def cmd_evaluate(args) -> int:
    cfg = _config(args.config)
    preds = sorted(args.pred.glob(f"*{VOLUME_SUFFIX}"))
    if not preds:
        raise FileNotFoundError(f"no {VOLUME_SUFFIX} volumes in {args.pred}")
    pairs = []
    for path in preds:
        pred, gt = read_volume(path), _label_of(args.gt / path.name)
        spacing = gt.spacing if gt is not None else pred.spacing
        pairs.append((path.stem, pred.label, gt.label if gt is not None else None, spacing))
    report = evaluate_pairs(pairs, cfg, args.threads)
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(report.to_csv(), encoding="utf-8")
    _echo(cfg, args.report.parent / "evaluate_config.txt")
    for case in report.failed():
        print(f"warning: case {case.case}: {'; '.join(case.flags)}", file=sys.stderr)
    m = report.mean
    print(f"{len(report.cases)} cases: mean dice {m['dice']:.6f}, adb {m['adb_mm']:.3f} mm, hdb {m['hdb_mm']:.3f} mm")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:40s} max rel error {r.error:.3e}  ({r.seconds:.2f}s)")
    worst = max(r.error for r in results)
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    np.seterr(over="ignore", under="ignore")
    handlers = {
        "gen-data": cmd_gen_data,
        "train": lambda a: cmd_train(a, compete=False),
        "compete": lambda a: cmd_train(a, compete=True),
        "predict": cmd_predict,
        "evaluate": cmd_evaluate,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
