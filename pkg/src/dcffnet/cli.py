"""Command-line entry point: ``dcffnet <command> ...``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import gradsuite
from .config import ABLATIONS, ConfigError, load_config, parse_config
from .data import DataError, SynthSpec, load_dataset, load_sequence, make_synth_sequence, parse_groundtruth, synth_sequence
from .evaluation import ope_evaluate, write_curves
from .model import param_count, param_shapes
from .tracker import TrackerModel, TrackingError, track_sequence, write_results
from .train import SequenceSource, TrainingDivergedError, new_checkpoint, parse_plan, run_plan

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6
EXIT_DIVERGED = 7
EXIT_TRACKING = 8
EXIT_EVAL = 9
EXIT_IO = 10


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcffnet", description="Siamese correlation-fusion tracker toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the training plan up to a stage")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--stage", required=True, type=int, help="last plan stage to run (1-based)")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--init", type=Path, help="checkpoint to resume from")
    t.add_argument("--data", type=Path, help="sequence directory or directory of sequences; "
                                             "defaults to one generated synthetic sequence")
    t.add_argument("--steps", type=int, help="override the steps per stage")

    k = sub.add_parser("track", help="track a sequence from its first ground-truth box")
    k.add_argument("--ckpt", required=True, type=Path)
    k.add_argument("--seq", required=True, type=Path)
    k.add_argument("--out", required=True, type=Path)
    k.add_argument("--dump-overlays", type=Path, metavar="DIR")

    e = sub.add_parser("eval", help="one-pass evaluation of a results file")
    e.add_argument("--results", required=True, type=Path)
    e.add_argument("--seq", required=True, type=Path)
    e.add_argument("--plot", type=Path, metavar="CSV")

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    g.add_argument("--op", action="append", choices=sorted(gradsuite.CHECKS))
    g.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write a synthetic sequence")
    s.add_argument("--spec", default="", help="comma-separated key=value overrides, e.g. length=60,step=8")
    s.add_argument("--out", required=True, type=Path)

    i = sub.add_parser("inspect", help="print a checkpoint's parameter table")
    i.add_argument("--ckpt", required=True, type=Path)
    return p


def _load_ckpt(path):
    ck = ckpt_io.load(path)
    cfg = parse_config(ck.config_text)
    ckpt_io.validate_shapes(ck.params, param_shapes(cfg.model))
    return ck, cfg


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    try:
        plan = parse_plan(cfg.train.plan, cfg.train.epoch_divisor)
    except ValueError as exc:
        raise ConfigError(f"[train] plan: {exc}") from None
    if not 1 <= args.stage <= len(plan):
        print(f"--stage must be in 1..{len(plan)}", file=sys.stderr)
        return EXIT_USAGE
    if args.data is not None:
        dataset = load_dataset(args.data)
    else:
        dataset = [make_synth_sequence(SynthSpec())]
    if args.init is not None:
        ck = ckpt_io.load(args.init, param_shapes(cfg.model))
    else:
        ck = new_checkpoint(cfg)
    if ck.stages_done >= args.stage:
        print(f"checkpoint already has {ck.stages_done} stage(s) done", file=sys.stderr)
    ck = run_plan(cfg, SequenceSource(dataset, cfg), ck, stop_after=args.stage, steps_per_stage=args.steps)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(ck, args.out)
    last = ck.loss_history[-1] if ck.loss_history else float("nan")
    print(f"stages_done={ck.stages_done} step={ck.step} last_loss={last:.6f} -> {args.out}")
    return EXIT_OK


def cmd_track(args) -> int:
    ck, cfg = _load_ckpt(args.ckpt)
    seq = load_sequence(args.seq)
    boxes = track_sequence(TrackerModel(cfg.model, ck.params), seq, cfg.tracker, args.dump_overlays)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_results(boxes, args.out)
    print(f"{len(boxes)} boxes -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    seq_gt = load_sequence(args.seq).boxes
    pred = parse_groundtruth(args.results.read_text())
    result = ope_evaluate(pred, seq_gt)
    if args.plot is not None:
        write_curves(result, args.plot)
    print(f"AUC={result.auc:.4f} P@{result.report_threshold:g}={result.precision_at:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradsuite.run(args.op, seed=args.seed)
    width = max(len(r.name) for r in reports)
    print(f"{'op':{width}}  max_rel_error  status")
    for r in reports:
        print(f"{r.name:{width}}  {r.worst:13.3e}  {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_GRADCHECK


def cmd_synth(args) -> int:
    spec = SynthSpec.parse(args.spec)
    path = synth_sequence(spec, args.out)
    print(f"{spec.length} frames -> {path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck, cfg = _load_ckpt(args.ckpt)
    names = sorted(ck.params)
    width = max(len(n) for n in names)
    print(f"{'parameter':{width}}  {'shape':>18}  {'count':>10}  dtype")
    total = 0
    for n in names:
        a = ck.params[n]
        total += a.size
        print(f"{n:{width}}  {str(a.shape):>18}  {a.size:10d}  {a.dtype}")
    print(f"total parameters: {total}")
    print(f"stages_done={ck.stages_done} step={ck.step}")
    counts = {name: param_count(cfg.model.ablation(name)) for name in ABLATIONS}
    for name, c in counts.items():
        print(f"ablation {name}: {c}")
    same = len(set(counts.values())) == 1 and total in counts.values()
    print(f"ablation parameter counts equal: {'yes' if same else 'no'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "inspect": cmd_inspect,
}

# most specific first: CheckpointError and ConfigError derive from ValueError
_ERRORS = (
    (ckpt_io.CheckpointError, EXIT_CHECKPOINT),
    (ConfigError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (TrainingDivergedError, EXIT_DIVERGED),
    (TrackingError, EXIT_TRACKING),
    (OSError, EXIT_IO),
)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # mapped to exit codes below
        for kind, code in _ERRORS:
            if isinstance(exc, kind):
                print(f"dcffnet {args.command}: {exc}", file=sys.stderr)
                return code
        if args.command == "eval" and isinstance(exc, ValueError):
            print(f"dcffnet eval: {exc}", file=sys.stderr)
            return EXIT_EVAL
        raise


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
