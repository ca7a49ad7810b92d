"""Command line entry points: simulate, pretrain, train, evaluate, report."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import tasks
from .neural import model as nm
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .scene import MODES, DatasetConfig, build_dataset, read_manifest

log = logging.getLogger("spatial_llm")

METRIC_HEADER = ("task", "method", "data_mode", "overlap_ratio", "metric", "value", "n")
FUSIONS = ("none", "before", "after")


class CliError(Exception):
    """Bad flags or missing inputs, reported before any work starts."""


def method_label(fusion: str, special_tokens: bool) -> str:
    label = "w/o IV" if fusion == "none" else f"w/ IV ({fusion.capitalize()})"
    return label + " ST." if special_tokens else label


def _parse_overlaps(text: str) -> list[float | None]:
    """Comma list of ratios; ``sim`` stands for the simultaneous condition."""
    out: list[float | None] = []
    for part in text.split(","):
        part = part.strip()
        if part in ("sim", "simultaneous"):
            out.append(None)
            continue
        try:
            r = float(part)
        except ValueError:
            raise CliError(f"bad overlap ratio {part!r}") from None
        if not 0.0 <= r <= 1.0:
            raise CliError(f"overlap ratio {r} outside [0, 1]")
        out.append(r)
    if not out:
        raise CliError("no overlap ratios given")
    return out


def _dataset_dirs(paths: Sequence[str]) -> list[Path]:
    """Expand each path to itself or to its immediate sub-datasets."""
    dirs: list[Path] = []
    for p in map(Path, paths):
        if (p / "manifest.jsonl").is_file():
            dirs.append(p)
            continue
        subs = sorted(d for d in p.glob("*") if (d / "manifest.jsonl").is_file()) if p.is_dir() else []
        if not subs:
            raise CliError(f"no dataset found at {p}")
        dirs.extend(subs)
    return dirs


def _load(dirs: Sequence[Path]):
    manifests, feats = [], {}
    for d in dirs:
        ms = read_manifest(d / "manifest.jsonl")
        feats.update(tasks.load_features(d, ms))
        manifests.extend(ms)
    return manifests, feats


# ------------------------------------------------------------------ subcommands


def cmd_simulate(args: argparse.Namespace) -> None:
    overlaps = _parse_overlaps(args.overlap)
    sources = args.sources
    out = Path(args.out)
    if sources == 1 and (len(overlaps) > 1 or overlaps[0] != 0.0):
        raise CliError("single-source datasets take no overlap")
    for ratio in overlaps:
        cfg = DatasetConfig(
            mode=args.mode,
            n_scenes=args.n,
            count_sources=sources,
            overlap_ratio=1.0 if ratio is None else ratio,
            simultaneous=ratio is None,
            seed=args.seed,
            prefix=args.prefix,
            pcm16=args.pcm16,
        )
        target = out
        if len(overlaps) > 1:
            target = out / ("simultaneous" if ratio is None else f"overlap-{ratio:.2f}")
        build_dataset(cfg, target)
        log.info("wrote %d scenes to %s", args.n, target)


def cmd_pretrain(args: argparse.Namespace) -> None:
    state = nm.init_state(nm.ModelConfig(seed=args.seed))
    losses = tasks.pretrain_decoder(state, steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, state, meta={"stage": "pretrain", "steps": args.steps, "final_loss": losses[-1]})


def _split_validation(manifests: list, fraction: float = 0.1) -> tuple[list, list]:
    n_val = max(1, int(round(len(manifests) * fraction))) if len(manifests) > 1 else 0
    return manifests[: len(manifests) - n_val], manifests[len(manifests) - n_val :]


def cmd_train(args: argparse.Namespace) -> None:
    base_path = Path(args.base)
    if not base_path.is_file():
        raise CliError(f"missing base checkpoint {base_path}")
    dirs = _dataset_dirs(args.data)
    base, _ = load_checkpoint(base_path)
    if args.queries is not None:
        aln = replace(base.config.aligner, queries_per_window=args.queries)
        base = nm.ModelState(replace(base.config, aligner=aln), base.params, base.trainable, base.tokenizer)
    manifests, feats = _load(dirs)
    train_m, val_m = _split_validation(manifests)
    train_qa = list(tasks.make_qa(train_m, args.task, feats))
    val_qa = list(tasks.make_qa(val_m, args.task, feats))
    cfg = tasks.TrainConfig(
        task=args.task,
        fusion=args.fusion,
        special_tokens=args.special_tokens,
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    res = tasks.train(cfg, base, train_qa, val_qa)
    meta = {
        "task": args.task,
        "fusion": args.fusion,
        "special_tokens": args.special_tokens,
        "method": method_label(args.fusion, args.special_tokens),
        "best_step": res.best_step,
        "steps": args.steps,
        "seed": args.seed,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.state, meta=meta)
    with open(out.with_suffix(".log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "split", "loss"))
        for i, loss in enumerate(res.losses, 1):
            w.writerow((i, "train", repr(loss)))
        for step, loss in res.val_log:
            w.writerow((step, "val", repr(loss)))


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def cmd_evaluate(args: argparse.Namespace) -> None:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"missing checkpoint {ckpt}")
    dirs = _dataset_dirs(args.data)
    state, meta = load_checkpoint(ckpt)
    task = meta.get("task")
    if task not in ("ssl", "fsr", "lse"):
        raise CliError(f"checkpoint {ckpt} carries no task tag")
    method = args.method or meta.get("method", "")
    manifests, feats = _load(dirs)
    qa = list(tasks.make_qa(manifests, task, feats))
    enc = tasks.EncoderCache(state)
    rows = []
    if task == "ssl":
        errs = tasks.eval_ssl(state, qa, enc).errors
        mode = manifests[0].mode
        for name, v in (("delta_a", errs.delta_a), ("delta_e", errs.delta_e), ("delta_d", errs.delta_d)):
            rows.append(("ssl", method, mode, "", name, _fmt(v), errs.n))
        rows.append(("ssl", method, mode, "", "unparseable_rate", _fmt(errs.unparseable_rate), errs.n))
    elif task == "fsr":
        w = tasks.eval_fsr(state, qa, enc)
        rows.append(("fsr", method, manifests[0].mode, "", "wer", _fmt(w), len(qa)))
    else:
        for b in tasks.eval_lse(state, qa, enc):
            ratio = "simultaneous" if b.activation == "simultaneous" else f"{b.overlap_ratio:g}"
            for name, v in (("sr", b.sr), ("swer", b.swer), ("wer", b.wer)):
                rows.append(("lse", method, b.mode, ratio, name, _fmt(v), b.n))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        w.writerows(rows)


def cmd_report(args: argparse.Namespace) -> None:
    from .report import build_report, read_metrics

    rows = []
    for p in args.metrics:
        if not Path(p).is_file():
            raise CliError(f"missing metrics file {p}")
        rows.extend(read_metrics(p))
    build_report(rows, args.out)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spatial-llm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a FOA scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="left_right")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sources", type=int, choices=(1, 2), default=2, help="sources per scene")
    p.add_argument("--overlap", default="0.0", help="comma list of ratios; 'sim' for simultaneous")
    p.add_argument("--prefix", default="scene")
    p.add_argument("--pcm16", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", help="stage-0 text pretraining of the base decoder")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=8000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train aligner, projection and adapters for one task")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--base", required=True, help="stage-0 checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("ssl", "fsr", "lse"), required=True)
    p.add_argument("--fusion", choices=FUSIONS, default="before")
    p.add_argument("--special-tokens", action="store_true")
    p.add_argument("--queries", type=int, help="aligner queries per window (default from the base checkpoint)")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint and write a metrics CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", help="override the method label stored in the checkpoint")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render SVG plots and a summary table")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one parsable line, no traceback
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
