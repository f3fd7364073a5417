"""Command-line entry point: generate, train, eval, analyze, pseudo-preview.

Exit status: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ExperimentConfig, read_flat
from .data import (GeneratorSpec, ScdDataset, collate, generate_dataset, open_dataset,
                   read_stats, _read_label)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .metrics import empty_transitions, transition_analysis, write_report, write_transitions
from .model import build_model, load_checkpoint
from .objectives import make_pseudo_labels
from .trainer import evaluate_maps, fit, predict
from .types import derive_change_mask


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _prepare_out(path: str, force: bool = True) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if not force and out.exists() and any(out.iterdir()):
        raise UsageError(f"--out {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    out = _prepare_out(args.out, args.force)
    flat = read_flat(args.spec) if args.spec else {}
    if args.seed is not None:
        flat["seed"] = str(args.seed)
    if args.count is not None:
        flat["count"] = str(args.count)
    spec = GeneratorSpec.from_flat(flat)
    splits = generate_dataset(spec, out)
    stats = read_stats(out)
    print(f"wrote {spec.count} samples to {out} "
          f"({', '.join(f'{k}: {len(m.ids)}' for k, m in splits.items())})")
    print(f"change fraction: {float(stats['change_fraction']):.4f} "
          f"(target {spec.change_fraction} +- {spec.change_tolerance})")
    total = sum(int(v) for k, v in stats.items() if k.startswith("pixels."))
    rows = sorted(((int(v), k.split(".", 1)[1]) for k, v in stats.items() if k.startswith("pixels.")),
                  reverse=True)
    print("transition histogram (changed pixels):")
    for count, pair in rows:
        a, b = pair.split("_")
        share = count / total if total else 0.0
        print(f"  {a} -> {b}: {count:>8}  {100 * share:6.2f}%  "
              f"(draws {stats[f'draws.{pair}']}, expected {100 * spec.transitions[(int(a), int(b))]:.2f}%)")
    return 0


def _load_split(data: str, split: str) -> ScdDataset:
    return ScdDataset(open_dataset(data, split))


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.override)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    exp = ExperimentConfig.load(args.config, overrides)
    out = _prepare_out(args.out)
    train_set = _load_split(args.data, args.train_split)
    if len(train_set) == 0:
        raise DataError(f"split {args.train_split!r} of {args.data} is empty")
    val_set = _load_split(args.data, args.val_split) if args.val_split else None
    if train_set.num_classes != exp.model.num_classes:
        raise ConfigError(f"dataset has {train_set.num_classes} classes, "
                          f"model.num_classes = {exp.model.num_classes}")
    resume = None
    if args.resume:
        model, payload = load_checkpoint(args.resume, exp.model)
        resume = payload["train_state"]
        if resume is None:
            raise CheckpointError(f"{args.resume} carries no training state")
    else:
        model = build_model(exp.model, exp.train.seed)
    exp.save(out / "config.cfg")
    trainer = fit(model, train_set, val_set, exp.train, out, resume=resume,
                  stop_after_epoch=args.stop_after_epoch)
    print(f"trained {trainer.iteration} iterations over {trainer.epoch} epochs; "
          f"best F_scd {trainer.best_score if trainer.best_score is not None else float('nan'):.4f}")
    print(f"checkpoints: {out / 'best.ckpt'}, {out / 'last.ckpt'}")
    return 0


def _predictions(args, ds: ScdDataset):
    if args.use_gt:
        return [(s.label1, s.label2) for s in ds]
    if not args.checkpoint:
        raise UsageError("either --checkpoint or --use-gt is required")
    model, _ = load_checkpoint(args.checkpoint)
    if model.cfg.num_classes != ds.num_classes:
        raise ConfigError(f"checkpoint has {model.cfg.num_classes} classes, data has {ds.num_classes}")
    return predict(model, ds, args.threshold)


def cmd_eval(args) -> int:
    out = _prepare_out(args.out)
    ds = _load_split(args.data, args.split)
    if len(ds) == 0:
        raise DataError(f"split {args.split!r} of {args.data} is empty")
    preds = _predictions(args, ds)
    result = evaluate_maps(preds, [(s.label1, s.label2) for s in ds], ds.num_classes,
                           pool_epochs=not args.average_epochs)
    write_report(result.report, out)
    write_transitions(result.transitions, out, list(ds.manifest.class_names))
    np.savetxt(out / "confusion.csv", result.confusion.counts, fmt="%d", delimiter=",")
    print(result.report.to_table(), end="")
    return 0


def cmd_analyze(args) -> int:
    out = _prepare_out(args.out)
    if args.pred_dir:
        manifest = open_dataset(args.data, "all")
        pred_root = Path(args.pred_dir)
        ids = sorted(p.stem for p in (pred_root / "label1").glob("*.png"))
        if not ids:
            raise DataError(f"no predictions under {pred_root / 'label1'}")
        maps = [(_read_label(pred_root / "label1" / f"{i}.png", manifest),
                 _read_label(pred_root / "label2" / f"{i}.png", manifest)) for i in ids]
        n, names = manifest.num_classes, list(manifest.class_names)
    else:
        ds = _load_split(args.data, args.split)
        if len(ds) == 0:
            raise DataError(f"split {args.split!r} of {args.data} is empty")
        maps = _predictions(args, ds)
        n, names = ds.num_classes, list(ds.manifest.class_names)
    tm = empty_transitions(n)
    for m1, m2 in maps:
        tm = tm + transition_analysis(m1, m2, n)
    write_transitions(tm, out, names)
    print(tm.summary(names), end="")
    print(f"false change percentage: {100 * tm.false_change_fraction:.2f}%")
    return 0


def cmd_pseudo_preview(args) -> int:
    out = _prepare_out(args.out)
    ds = _load_split(args.data, args.split)
    if len(ds) == 0:
        raise DataError(f"split {args.split!r} of {args.data} is empty")
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    thresholds = args.threshold or [model.cfg.pseudo_threshold]
    palette = [c for rgb in ds.manifest.palette for c in rgb]
    labelled = {t: 0 for t in thresholds}
    unchanged = 0
    with torch.no_grad():
        for start in range(0, len(ds), 8):
            samples = [ds[i] for i in range(start, min(start + 8, len(ds)))]
            batch = collate(samples)
            res = model(batch["image1"], batch["image2"])
            mask = derive_change_mask(batch["label1"], batch["label2"])
            unchanged += int((mask == 0).sum())
            for t in thresholds:
                pseudo = make_pseudo_labels(res.prob1, res.prob2, mask, t, args.source)
                labelled[t] += int((pseudo != 0).sum())
                tdir = out / f"T{t:g}"
                tdir.mkdir(exist_ok=True)
                for s, p in zip(samples, pseudo):
                    im = Image.fromarray(p.numpy().astype(np.uint8), mode="P")
                    im.putpalette(palette)
                    im.save(tdir / f"{s.sample_id}.png")
    lines = []
    for t in thresholds:
        cov = labelled[t] / unchanged if unchanged else 0.0
        lines.append(f"T={t:g} coverage={cov!r}")
        print(f"T={t:g}: {100 * cov:.2f}% of unchanged pixels pseudo-labelled")
    (out / "coverage.txt").write_text("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scanscd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory; all files land here")
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress")

    g = sub.add_parser("generate", help="write a synthetic bi-temporal dataset")
    common(g)
    g.add_argument("--spec", help="generator config file (key = value)")
    g.add_argument("--count", type=int, help="number of samples (overrides the config)")
    g.add_argument("--force", action="store_true", help="allow a non-empty --out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--config", help="experiment config with model.* and train.* keys")
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. train.lambda_chg=0 (repeatable, last wins)")
    t.add_argument("--train-split", default="train")
    t.add_argument("--val-split", default="val", help="split used for best-checkpoint selection "
                   "('' to use the training split)")
    t.add_argument("--resume", help="continue from a last.ckpt written by an earlier run")
    t.add_argument("--stop-after-epoch", type=int, help="stop early (the schedule is unchanged)")
    t.set_defaults(func=cmd_train)

    def predictor(sp):
        sp.add_argument("--data", required=True, help="dataset root")
        sp.add_argument("--split", default="test")
        sp.add_argument("--checkpoint", help="model checkpoint")
        sp.add_argument("--use-gt", action="store_true", help="score ground truth against itself")
        sp.add_argument("--threshold", type=float, default=0.5, help="change probability threshold")

    e = sub.add_parser("eval", help="compute OA, mIoU, SeK and F_scd")
    common(e)
    predictor(e)
    e.add_argument("--average-epochs", action="store_true",
                   help="score each epoch separately and average instead of pooling")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="from-to change transition analysis")
    common(a)
    predictor(a)
    a.add_argument("--pred-dir", help="directory with label1/ and label2/ prediction maps")
    a.set_defaults(func=cmd_analyze)

    pp = sub.add_parser("pseudo-preview", help="write pseudo labels and their coverage")
    common(pp)
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--data", required=True)
    pp.add_argument("--split", default="train")
    pp.add_argument("--threshold", type=float, action="append",
                    help="cosine threshold T (repeatable; default: the model's)")
    pp.add_argument("--source", choices=("first", "second", "mean"), default="first")
    pp.set_defaults(func=cmd_pseudo_preview)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"scanscd: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"scanscd: data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"scanscd: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
