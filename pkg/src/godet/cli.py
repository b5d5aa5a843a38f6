"""``godet`` command line: synth, train, finetune, detect, evaluate, sweep, render, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed gradient check.
Every run prints its resolved configuration as ``key = value`` lines, which
can be fed back through ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from godet.checkpoint import CheckpointError, atomic_write_bytes
from godet.config import load_config
from godet.errors import DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("godet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _suites(text: str) -> list[str]:
    from godet.gradcheck import SUITES

    names = [v.strip() for v in text.split(",") if v.strip()]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown suites {unknown}; choose from {sorted(SUITES)}")
    return names


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# -- parser ------------------------------------------------------------------

REQUIRED: dict[str, tuple] = {}


def _sub(subs, name, help, required=()):
    p = subs.add_parser(name, help=help, description=help)
    p.add_argument("--config", help="plain-text key = value file; explicit flags take precedence")
    REQUIRED[name] = required
    return p


def _hyperparams(p, epochs=20):
    p.add_argument("--epochs", type=_positive_int, default=epochs)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--decay-every", type=_positive_int, default=10, help="epochs between learning-rate decays")
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0, help="initialization and sampling seed")


def build_parser() -> argparse.ArgumentParser:
    from godet.data.synth import SYNTH_PRESETS
    from godet.detector.model import BACKBONE_PRESETS
    from godet.gradcheck import SUITES

    parser = _Parser(prog="godet", description="Graphical object detection in document images.")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = _sub(subs, "synth", "render a synthetic page corpus with a manifest", ("out",))
    p.add_argument("--out", help="output directory (images/ and manifest.json)")
    p.add_argument("--count", type=_positive_int, default=300)
    p.add_argument("--preset", choices=sorted(SYNTH_PRESETS), default="base")
    p.add_argument("--seed", type=int, default=0, help="corpus seed; page i is a function of (seed, i)")
    p.add_argument("--start", type=int, default=0, help="index of the first page")
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--name", default="synth")
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = _sub(subs, "train", "train a detector from scratch", ("train", "out"))
    p.add_argument("--train", help="training manifest")
    p.add_argument("--out", help="run directory for checkpoints, loss.csv and loss.png")
    # the toy preset has stride 4 and exists only for gradient checks
    p.add_argument("--backbone", choices=sorted(set(BACKBONE_PRESETS) - {"toy"}), default="tiny")
    p.add_argument("--roi-mode", choices=("align", "pool"), default="align")
    _hyperparams(p)

    p = _sub(subs, "finetune", "continue training a checkpoint on a new corpus", ("checkpoint", "train", "out"))
    p.add_argument("--checkpoint")
    p.add_argument("--train", help="training manifest")
    p.add_argument("--out", help="run directory")
    _hyperparams(p, epochs=10)

    p = _sub(subs, "detect", "run a checkpoint over a manifest's images", ("checkpoint", "manifest", "out"))
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out", help="predictions file (JSON lines)")
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.add_argument("--nms-threshold", type=float, default=0.3)
    p.add_argument("--render-dir", help="also write annotated PNGs here")
    p.add_argument("--render-cutoff", type=float, default=0.5, help="minimum score drawn by --render-dir")
    p.add_argument("--jobs", type=_positive_int, default=1)

    for name, help in (("evaluate", "score predictions at one IoU threshold"),
                       ("sweep", "score predictions over several IoU thresholds")):
        p = _sub(subs, name, help, ("gt", "pred"))
        p.add_argument("--gt", help="ground-truth manifest")
        p.add_argument("--pred", help="predictions file (JSON lines)")
        if name == "evaluate":
            p.add_argument("--iou", type=float, default=0.5)
        else:
            p.add_argument("--iou", type=_floats, default="0.5,0.6,0.7,0.8")
        p.add_argument("--score-cutoff", type=float, default=0.5, help="operating point for P/R/F1")
        p.add_argument("--report", help="TSV report path (default: next to --pred)")
        p.add_argument("--jobs", type=_positive_int, default=1)

    p = _sub(subs, "render", "draw ground truth or predictions onto page images", ("manifest", "out_dir"))
    p.add_argument("--manifest")
    p.add_argument("--pred", help="predictions to draw instead of the ground truth")
    p.add_argument("--score-cutoff", type=float, default=0.5)
    p.add_argument("--out-dir")
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = _sub(subs, "gradcheck", "finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", type=_suites, help=f"comma-separated subset of {','.join(SUITES)}; default all")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("godet: a subcommand is required (see --help)")
    if args.config:
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions} - {"help", "config"}
        overrides = load_config(args.config)
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise UsageError(f"godet {args.command}: unknown config keys {unknown} in {args.config}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    missing = [f"--{d.replace('_', '-')}" for d in REQUIRED[args.command] if getattr(args, d) is None]
    if missing:
        raise UsageError(f"godet {args.command}: missing required arguments: {', '.join(missing)}")
    return args


def resolved_config(args) -> str:
    lines = [f"# godet {args.command}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config") or value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# -- commands ----------------------------------------------------------------

def _hp(args):
    from godet.numerics import TrainHyperparams

    try:
        return TrainHyperparams(args.learning_rate, args.decay_factor, args.decay_every, args.batch_size,
                                args.momentum, args.weight_decay, args.epochs)
    except ValueError as exc:
        raise UsageError(f"godet {args.command}: {exc}") from None


def _load(path, check_images=True):
    from godet.data import load_manifest

    return load_manifest(path, check_images)


def cmd_synth(args, echo):
    from godet.data.synth import SYNTH_PRESETS, synth_corpus
    from dataclasses import replace

    cfg = replace(SYNTH_PRESETS[args.preset], seed=args.seed)
    manifest = synth_corpus(cfg, args.count, args.out, args.name, args.split, args.start, args.jobs)
    n = sum(len(d.annotations) for d in manifest.entries)
    print(f"wrote {len(manifest)} pages with {n} objects to {os.path.join(args.out, 'manifest.json')}")


def _write_run_files(out, echo, trace):
    from godet.plotting import plot_loss_trace

    atomic_write_bytes(os.path.join(out, "config.txt"), echo.encode("utf-8"))
    plot_loss_trace(trace, os.path.join(out, "loss.png"))


def cmd_train(args, echo):
    from godet.detector.model import BackboneConfig, DetectorModel, ModelConfig
    from godet.detector.roi import RoiConfig
    from godet.detector.train import prepare_dataset, train
    from godet.geometry import LabelSet

    hp = _hp(args)
    manifest = _load(args.train)
    cfg = ModelConfig(backbone=BackboneConfig(args.backbone), roi=RoiConfig(args.roi_mode),
                      labels=tuple(manifest.labels))
    model = DetectorModel(cfg, seed=args.seed)
    data = prepare_dataset(manifest.entries, LabelSet(manifest.labels), cfg.input_size)
    os.makedirs(args.out, exist_ok=True)
    model, trace = train(model, data, hp, seed=args.seed, checkpoint_dir=args.out)
    _write_run_files(args.out, echo, trace)
    print(f"trained {hp.epochs} epochs; final loss {trace.records[-1].total:.4f}; "
          f"checkpoint {os.path.join(args.out, 'last.ckpt')}")


def cmd_finetune(args, echo):
    from godet.detector.model import DetectorModel
    from godet.detector.train import fine_tune, prepare_dataset
    from godet.geometry import LabelSet

    hp = _hp(args)
    manifest = _load(args.train)
    base = DetectorModel.load(args.checkpoint)
    labels = tuple(manifest.labels)
    data = prepare_dataset(manifest.entries, LabelSet(labels), base.config.input_size)
    os.makedirs(args.out, exist_ok=True)
    model, trace = fine_tune(base, data, hp, labels=labels, seed=args.seed, checkpoint_dir=args.out)
    _write_run_files(args.out, echo, trace)
    print(f"fine-tuned {hp.epochs} epochs; final loss {trace.records[-1].total:.4f}; "
          f"checkpoint {os.path.join(args.out, 'last.ckpt')}")


def _render_one(task):
    from godet.data import render, save_png

    pixels, dets, path = task
    save_png(path, render(pixels, dets).pixels)
    return path


def _render_all(manifest, preds, out_dir, cutoff, jobs):
    os.makedirs(out_dir, exist_ok=True)

    def tasks():
        for doc in manifest.entries:
            if preds is None:
                dets = [(a.box, a.label) for a in doc.annotations]
            else:
                dets = [d for d in preds.get(doc.image_id, []) if d.score >= cutoff]
            try:
                pixels = doc.pixels()
            except OSError as exc:
                raise DataError(f"{doc.image_id}: cannot read {doc.image_path}: {exc}") from None
            yield pixels, dets, os.path.join(out_dir, f"{doc.image_id}.png")

    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_render_one, tasks()))
    return [_render_one(t) for t in tasks()]


def cmd_detect(args, echo):
    from godet.detector.inference import detect_many
    from godet.detector.model import DetectorModel
    from godet.evaluation import write_predictions

    model = DetectorModel.load(args.checkpoint)
    manifest = _load(args.manifest)
    preds = detect_many(model, manifest.entries, args.score_threshold, args.nms_threshold, args.jobs)
    write_predictions(args.out, preds)
    n = sum(len(v) for v in preds.values())
    print(f"wrote {n} detections over {len(preds)} images to {args.out}")
    if args.render_dir:
        paths = _render_all(manifest, preds, args.render_dir, args.render_cutoff, args.jobs)
        print(f"rendered {len(paths)} images to {args.render_dir}")


def _evaluate_task(task):
    from godet.evaluation import evaluate

    preds, gts, thr, labels, cutoff = task
    return evaluate(preds, gts, thr, labels, cutoff)


def _scored(args):
    from godet.evaluation import ground_truth_from_manifest, read_predictions

    manifest = _load(args.gt, check_images=False)
    gts = ground_truth_from_manifest(manifest)
    try:
        preds = read_predictions(args.pred, gts)
    except OSError as exc:
        raise DataError(f"cannot read predictions {args.pred}: {exc.strerror}") from None
    extra = sorted(set(preds) - set(gts))
    if extra:
        raise DataError(f"{args.pred}: image ids not in {args.gt}: {extra[:5]}")
    thresholds = args.iou if isinstance(args.iou, list) else [args.iou]
    if not thresholds or any(not 0 < t <= 1 for t in thresholds):
        raise UsageError(f"godet {args.command}: IoU thresholds must lie in (0, 1], got {thresholds}")
    if thresholds != sorted(thresholds):
        raise UsageError(f"godet {args.command}: IoU thresholds must be ascending, got {thresholds}")
    tasks = [(preds, gts, t, list(manifest.labels), args.score_cutoff) for t in thresholds]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            return list(pool.map(_evaluate_task, tasks))
    return [_evaluate_task(t) for t in tasks]


def _report_path(args, suffix):
    if args.report:
        return args.report
    stem = os.path.splitext(args.pred)[0]
    return f"{stem}.{suffix}.tsv"


def cmd_evaluate(args, echo):
    from godet.evaluation import reports_to_tsv
    from godet.plotting import plot_pr_curves

    (report,) = _scored(args)
    path = _report_path(args, f"iou{args.iou:.2f}")
    atomic_write_bytes(path, (echo_comment(echo) + reports_to_tsv([report])).encode("utf-8"))
    plot_pr_curves(report, os.path.splitext(path)[0] + ".pr.png")
    print(report.format_table())
    print(f"IoU {report.iou_threshold:.2f}  mAP {report.map:.4f}  Ave F1 {report.ave_f1:.4f}  report {path}")


def cmd_sweep(args, echo):
    from godet.evaluation import reports_to_tsv
    from godet.plotting import plot_pr_curves, plot_sweep

    reports = _scored(args)
    path = _report_path(args, "sweep")
    atomic_write_bytes(path, (echo_comment(echo) + reports_to_tsv(reports)).encode("utf-8"))
    stem = os.path.splitext(path)[0]
    plot_sweep(reports, stem + ".png")
    for r in reports:
        plot_pr_curves(r, f"{stem}.iou{r.iou_threshold:.2f}.pr.png")
    for r in reports:
        print(f"IoU {r.iou_threshold:.2f}  mAP {r.map:.4f}  Ave F1 {r.ave_f1:.4f}")
    print(f"report {path}")


def echo_comment(echo: str) -> str:
    """The resolved config as ``#`` comment lines, for report headers."""
    return "".join(l if l.startswith("#") else f"# {l}" for l in echo.splitlines(keepends=True))


def cmd_render(args, echo):
    from godet.evaluation import read_predictions

    manifest = _load(args.manifest)
    preds = None
    if args.pred:
        try:
            preds = read_predictions(args.pred)
        except OSError as exc:
            raise DataError(f"cannot read predictions {args.pred}: {exc.strerror}") from None
    paths = _render_all(manifest, preds, args.out_dir, args.score_cutoff, args.jobs)
    print(f"rendered {len(paths)} images to {args.out_dir}")


def cmd_gradcheck(args, echo):
    from godet.gradcheck import TOLERANCE, run_suites

    results = run_suites(args.seed, args.suite)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24}{r.max_rel_error:>12.3e}  {status}  ({r.seconds:.2f} s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} suites within {TOLERANCE:g}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "finetune": cmd_finetune, "detect": cmd_detect,
    "evaluate": cmd_evaluate, "sweep": cmd_sweep, "render": cmd_render, "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"godet: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    echo = resolved_config(args)
    sys.stdout.write(echo)
    sys.stdout.flush()
    try:
        code = COMMANDS[args.command](args, echo)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"godet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"godet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
