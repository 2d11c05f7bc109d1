"""``eslm`` command line: train, distill, eval, inspect-selection, report, encode-corpus.

Run directories are created under ``$ESLM_RUN_ROOT`` (default ``./runs``)
unless ``--run-dir`` is given.  Exit status is 0 on success, 1 for usage
and configuration errors, 2 for failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from eslm import checkpoint as ckpt_io
from eslm.config import ConfigError, TrainConfig, desk_profile, from_flat, parse_config_text, parse_overrides, to_flat
from eslm.data import MixtureSpec, TokenFileError, encode_corpus, write_local_corpus
from eslm.inspection import inspect_selection
from eslm.metrics import MetricsParseError
from eslm.report import report
from eslm.risk import ScoreKind
from eslm.trainer import Trainer, TrainingDiverged, evaluate, latest_checkpoint

RUN_ROOT_ENV = "ESLM_RUN_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("eslm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV) or "runs")


def _resolve_config(args) -> TrainConfig:
    flat: dict[str, str] = {}
    if args.profile == "desk":
        flat.update(to_flat(desk_profile()))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        flat.update(parse_config_text(path.read_text()))
    flat.update(parse_overrides(args.set or []))
    return from_flat(flat)


def _mixture(cfg: TrainConfig) -> MixtureSpec:
    if not cfg.data.manifest:
        raise UsageError("data.manifest is not set; create one with `eslm encode-corpus --local DIR`")
    path = Path(cfg.data.manifest)
    if not path.is_file():
        raise UsageError(f"mixture manifest not found: {path}")
    return MixtureSpec.load(path)


def _run_dir(args, cfg: TrainConfig, kind: str) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    name = args.name or f"{kind}-{cfg.mode.value}-seed{cfg.seed}"
    return run_root() / name


def _load_params(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return ckpt_io.load(path).model_params()


def _print_summary(trainer: Trainer) -> None:
    evals = [r for r in trainer.history if r.event == "eval"]
    out = {"run_dir": str(trainer.run_dir), "steps": trainer.step, "flops_cum": trainer.ledger.flops_total}
    if evals:
        out["final_val_loss"] = evals[-1].val_loss
        out["final_alpha"] = evals[-1].alpha
    print(json.dumps(out))


def _train(args, teacher=None) -> int:
    cfg = _resolve_config(args)
    mixture = _mixture(cfg)
    run_dir = _run_dir(args, cfg, "distill" if teacher is not None else "train")
    resume_from = latest_checkpoint(run_dir) if args.resume else None
    if resume_from is not None:
        log.info("resuming from %s", resume_from)
        trainer = Trainer.resume(cfg, resume_from, run_dir, mixture=mixture, teacher=teacher)
    else:
        trainer = Trainer(cfg, mixture, run_dir=run_dir, teacher=teacher)
    log.info("run dir %s, %d params, mode %s", run_dir, trainer.params.n_params, cfg.mode.value)
    trainer.run(resume=resume_from is not None)
    _print_summary(trainer)
    return EXIT_OK


def cmd_train(args) -> int:
    return _train(args)


def cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    teacher_path = args.teacher or cfg.kd.teacher_checkpoint
    if not teacher_path:
        raise UsageError("distill needs --teacher or kd.teacher_checkpoint")
    return _train(args, teacher=_load_params(teacher_path))


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not args.config:
        # default to the snapshot written next to the checkpoints
        snap = ckpt_path.parent.parent / "config.cfg"
        if snap.is_file():
            args.config = str(snap)
    cfg = _resolve_config(args)
    params = _load_params(ckpt_path)
    if params.config != cfg.model:
        raise UsageError(f"checkpoint model {params.config} does not match config model {cfg.model}")
    _, val = _mixture(cfg).split(cfg.data.val_fraction)
    res = evaluate(params, val, cfg, args.alpha)
    print(json.dumps({"checkpoint": str(ckpt_path), **res.__dict__}))
    return EXIT_OK


def cmd_inspect_selection(args) -> int:
    if args.text is not None:
        text = args.text.encode("utf-8")
    elif args.text_file:
        path = Path(args.text_file)
        if not path.is_file():
            raise UsageError(f"text file not found: {path}")
        text = path.read_bytes()
    else:
        text = sys.stdin.buffer.read()
    if len(text) < 2:
        raise UsageError(f"text must contain at least 2 tokens, got {len(text)}")
    params = _load_params(args.checkpoint)
    res = inspect_selection(params, text, args.alpha, args.kind, standardize=not args.no_standardize)
    sys.stdout.write(res.render(args.top_k))
    return EXIT_OK


def cmd_report(args) -> int:
    for p in args.metrics:
        if not Path(p).is_file():
            raise UsageError(f"metrics file not found: {p}")
    table, series, _ = report(args.metrics, args.target)
    sys.stdout.write(table)
    if args.series:
        Path(args.series).write_text(series)
        log.info("wrote series to %s", args.series)
    return EXIT_OK


def cmd_encode_corpus(args) -> int:
    if args.local:
        manifest = write_local_corpus(args.output, args.min_bytes)
        print(manifest)
        return EXIT_OK
    if args.input is None:
        raise UsageError("encode-corpus needs INPUT OUTPUT or --local OUTPUT_DIR")
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    tf = encode_corpus(src, args.output)
    print(json.dumps({"output": args.output, "tokens": tf.token_count, "vocab_size": tf.vocab_size}))
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--profile", choices=("reference", "desk"), default="reference",
                   help="base values applied before the config file")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    _add_config_args(p)
    p.add_argument("--run-dir", help=f"run directory (default ${RUN_ROOT_ENV}/<name>)")
    p.add_argument("--name", help="run name under the run root")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eslm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="pretrain with CLM, ESLM, Ada-ESLM or random selection")
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="risk-selected distillation from a frozen teacher")
    _add_run_args(p)
    p.add_argument("--teacher", help="teacher checkpoint (overrides kd.teacher_checkpoint)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="validation loss and tail risk of a checkpoint")
    p.add_argument("checkpoint")
    _add_config_args(p)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-selection", help="show which tokens a checkpoint would train on")
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--text")
    src.add_argument("--text-file")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--kind", choices=[k.value for k in ScoreKind], default=ScoreKind.LOSS.value)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--no-standardize", action="store_true")
    p.set_defaults(func=cmd_inspect_selection)

    p = sub.add_parser("report", help="FLOPs-to-target table across runs")
    p.add_argument("metrics", nargs="+", help="metrics.jsonl files; the first sets the default target")
    p.add_argument("--target", type=float, default=None, help="target validation loss")
    p.add_argument("--series", help="write (run, step, flops_cum, val_loss, alpha) CSV here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("encode-corpus", help="byte-level encode text into a token file")
    p.add_argument("input", nargs="?")
    p.add_argument("output")
    p.add_argument("--local", action="store_true",
                   help="write the offline stdlib-derived corpus and mixture manifest into OUTPUT")
    p.add_argument("--min-bytes", type=int, default=1 << 20)
    p.set_defaults(func=cmd_encode_corpus)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"eslm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ckpt_io.CheckpointError, MetricsParseError, TokenFileError,
            ValueError, OSError) as exc:
        print(f"eslm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
