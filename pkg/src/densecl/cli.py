"""``densecl`` command line: train, eval-corr, eval-knn, visualize, inspect.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error, 5 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from densecl.config import Config, describe_defaults, parse_config
from densecl.data import Dataset, SynthSpec, generate_synthetic, ingest_folder, load_image
from densecl.errors import ConfigError, DataError, DenseCLError, StorageError

log = logging.getLogger("densecl")

COMMANDS = ("train", "eval-corr", "eval-knn", "visualize", "inspect")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densecl", description="Dense contrastive pre-training")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt_required=False):
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--data-dir", type=Path, help="image folder (default: synthetic data)")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--ckpt", type=Path, required=ckpt_required, help="checkpoint file")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="pre-train an encoder")
    common(t)
    t.add_argument("--init", type=Path, help="warm start: load weights only from this checkpoint")
    t.add_argument("--resume", action="store_true", help="resume the full state from --ckpt")

    common(sub.add_parser("eval-corr", help="correspondence accuracy vs crop geometry"), True)
    common(sub.add_parser("eval-knn", help="kNN probe on global embeddings"), True)

    v = sub.add_parser("visualize", help="mutual-match panel and CSV for one image")
    common(v, True)
    v.add_argument("--image", type=Path, required=True)
    v.add_argument("--threshold", type=float, default=None)

    i = sub.add_parser("inspect", help="list checkpoint tensors, or config defaults")
    i.add_argument("ckpt", type=Path, nargs="?")
    i.add_argument("--defaults", action="store_true", help="print every config key and default")
    return p


def load_data(cfg: Config, data_dir: Optional[Path]) -> Dataset:
    data_dir = data_dir or (Path(cfg.data.dir) if cfg.data.dir else None)
    if data_dir is not None:
        ds = ingest_folder(data_dir)
        log.info("dataset: %d images from %s", len(ds), data_dir)
        for name in ds.skipped:
            log.warning("skipped %s", name)
        return ds
    spec = SynthSpec(cfg.data.n_images, cfg.data.image_size, cfg.data.n_classes, cfg.data.seed)
    return generate_synthetic(spec)


def knn_split(cfg: Config, ds: Dataset, data_dir: Optional[Path]):
    """(train, test) for the probe: a held-out synthetic stream or every 5th image."""
    if not ds.labeled:
        raise DataError("eval-knn needs labels (labels.csv in the data folder)")
    if data_dir is None and not cfg.data.dir:
        spec = SynthSpec(cfg.data.n_images, cfg.data.image_size, cfg.data.n_classes, cfg.data.seed)
        return ds, generate_synthetic(spec, offset=spec.n_images, count=cfg.eval.test_images)
    idx = np.arange(len(ds))
    return ds.subset(idx[idx % 5 != 0]), ds.subset(idx[idx % 5 == 0])


def _write_effective(cfg: Config, out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.txt").write_text(cfg.text())
    except OSError as exc:
        raise StorageError(f"cannot write to output directory {out}: {exc}") from exc


def _load_state(cfg: Config, ckpt: Path):
    from densecl.checkpoint import load_checkpoint
    return load_checkpoint(ckpt, cfg.train)


def cmd_train(args, cfg: Config) -> int:
    from densecl.checkpoint import load_checkpoint
    from densecl.trainer import train

    ds = load_data(cfg, args.data_dir)
    state = None
    if args.resume:
        if args.ckpt is None:
            raise ConfigError("--resume needs --ckpt")
        state = load_checkpoint(args.ckpt, cfg.train)
    elif args.init is not None:
        state = load_checkpoint(args.init, cfg.train, weights_only=True)
    state, tlog = train(ds.images, cfg.train, out_dir=args.out, state=state)
    last = tlog.epochs[-1] if tlog.epochs else None
    if last is not None:
        print(f"trained {state.iteration} iterations; last epoch l_total={last.l_total:.4f}")
    print(f"checkpoint: {args.out / 'final.ckpt'}")
    return 0


def _write_report(out: Path, name: str, report: dict) -> None:
    try:
        (out / name).write_text(json.dumps(report, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {out / name}: {exc}") from exc


def _print_table(rows) -> None:
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")


def cmd_eval_corr(args, cfg: Config) -> int:
    from densecl.eval import correspondence_accuracy

    ds = load_data(cfg, args.data_dir)
    state = _load_state(cfg, args.ckpt)
    score = correspondence_accuracy(state.query, ds.images, cfg.train.grid_size, cfg.eval.n_pairs,
                                    cfg.eval.seed, cfg.train.augment, cfg.eval.photometric)
    report = {"correspondence_accuracy": score.accuracy, "exact_accuracy": score.exact_accuracy,
              "mean_valid_matches": score.mean_valid, "n_queries": score.n_evaluated,
              "knn_accuracy": None, "num_images": len(ds)}
    _write_report(args.out, "eval_corr.json", report)
    _print_table([(k, v) for k, v in report.items() if v is not None])
    return 0


def cmd_eval_knn(args, cfg: Config) -> int:
    from densecl.eval import knn_probe

    ds = load_data(cfg, args.data_dir)
    train_set, test_set = knn_split(cfg, ds, args.data_dir)
    state = _load_state(cfg, args.ckpt)
    acc = knn_probe(state.query, train_set.images, train_set.labels, test_set.images,
                    test_set.labels, cfg.eval.knn_k, cfg.train.augment.out_size)
    report = {"correspondence_accuracy": None, "mean_valid_matches": None, "knn_accuracy": acc,
              "num_images": len(train_set) + len(test_set), "k": cfg.eval.knn_k}
    _write_report(args.out, "eval_knn.json", report)
    _print_table([(k, v) for k, v in report.items() if v is not None])
    return 0


def cmd_visualize(args, cfg: Config) -> int:
    from densecl.eval import export_matches

    try:
        image = load_image(args.image)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {args.image}: {exc}") from exc
    state = _load_state(cfg, args.ckpt)
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    stem = args.image.stem
    panel_path, table_path = args.out / f"{stem}_matches.png", args.out / f"{stem}_matches.csv"
    _, records = export_matches(state.query, image, threshold, panel_path, table_path,
                                cfg.eval.seed, cfg.train.augment)
    print(f"{len(records)} mutual matches with similarity >= {threshold:g}")
    print(f"panel: {panel_path}\ntable: {table_path}")
    return 0


def cmd_inspect(args) -> int:
    from densecl.checkpoint import inspect_checkpoint

    if args.defaults or args.ckpt is None:
        sys.stdout.write(describe_defaults())
        return 0
    for e in inspect_checkpoint(args.ckpt):
        shape = "x".join(str(d) for d in e.shape) or "scalar"
        print(f"{e.name:<48} {e.dtype:<4} {shape}")
    return 0


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "densecl"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("densecl"):
            name = mod
        tb = tb.tb_next
    return name


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("DCL_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error [densecl.cli]: DCL_THREADS must be an integer, got {threads!r}",
                  file=sys.stderr)
            return ConfigError.exit_code
    try:
        if args.command == "inspect":
            return cmd_inspect(args)
        cfg = parse_config(args.config, args.overrides)
        _write_effective(cfg, args.out)
        handler = {"train": cmd_train, "eval-corr": cmd_eval_corr, "eval-knn": cmd_eval_knn,
                   "visualize": cmd_visualize}[args.command]
        return handler(args, cfg)
    except DenseCLError as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        if getattr(args, "verbose", False):
            traceback.print_exc()
        return exc.exit_code
    except OSError as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return StorageError.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
