"""Command-line entry point wiring data, training, evaluation, and reports.

Exit codes: 0 on success, 1 on runtime failures (missing or corrupted
artifacts, refused overwrites, training errors), 2 on usage and format
errors. A run whose compatibility checks fail still exits 0: compatibility
is a measured result, not a tool failure. Errors print one
``error: <ExceptionClass>: <message>`` line to stderr; data goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

from ._version import __version__
from .data import (
    LabeledSet,
    Method,
    TimelineMode,
    build_timeline,
    gen_blobs,
    load_idx,
    make_verification_pairs,
    split_eval_classes,
)
from .errors import (
    CapacityExceededError,
    CoresError,
    FormatError,
    InvalidLabelError,
    InvalidParameterError,
    MissingArgumentError,
    UndefinedMetricError,
    UnknownPresetError,
)
from .gallery import FeatureGallery, read_gallery, read_manifest, write_gallery
from .metrics import (
    METRIC_MAP,
    METRIC_VERIFICATION,
    build_compatibility_matrix,
    build_report,
    render_matrix_table,
    report_to_json_dict,
)
from .netcore import InitMode, TrainConfig
from .polytope import dsimplex_prototypes, polygon_prototypes
from .report import BUILTIN_PRESETS, get_preset, run_preset
from .timeline import build_eval_protocol, run_timeline

RAW_DATA_MODEL_ID = "raw-input"

# Errors the caller fixes by changing flags or inputs exit 2; everything the
# tool hits while doing otherwise-valid work exits 1.
_USAGE_ERRORS = (
    MissingArgumentError,
    FormatError,
    InvalidParameterError,
    InvalidLabelError,
    UnknownPresetError,
    UndefinedMetricError,
    CapacityExceededError,
)


def _fractions_arg(text: str) -> tuple:
    try:
        parts = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}")
    if not parts:
        raise argparse.ArgumentTypeError("fraction list is empty")
    return parts


def _int_list_arg(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}")


def _schedule_arg(text: str) -> tuple:
    """Parse '70:0.01,90:0.001' into ((70, 0.01), (90, 0.001))."""
    entries = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            epoch, rate = chunk.split(":")
            entries.append((int(epoch), float(rate)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad schedule entry {chunk!r}")
    return tuple(entries)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cores",
        description="Fixed-classifier feature learning with sequential "
                    "training-set upgrades.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    gen = sub.add_parser("gen-data", help="write a labeled dataset file")
    gen.add_argument("--classes", type=int, help="number of blob classes")
    gen.add_argument("--per-class", type=int, help="samples per class")
    gen.add_argument("--dim", type=int, help="input dimensionality")
    gen.add_argument("--spread", type=float, default=0.35,
                     help="blob noise standard deviation")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--idx-images", help="IDX image file to convert")
    gen.add_argument("--idx-labels", help="IDX label file to convert")
    gen.add_argument("--out", help="output dataset path (required)")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="train an upgrade timeline")
    train.add_argument("--data", required=True, help="dataset file from gen-data")
    train.add_argument("--method", choices=[m.value for m in Method],
                       default=Method.CORES.value)
    train.add_argument("--fractions", type=_fractions_arg, default=(0.5, 1.0),
                       help="comma-separated upgrade fractions, e.g. 0.5,1.0")
    train.add_argument("--mode", choices=[m.value for m in TimelineMode],
                       default=TimelineMode.BY_CLASS.value,
                       help="how each step's subset grows")
    train.add_argument("--k", type=int, default=None,
                       help="classifier outputs (default: training class count)")
    train.add_argument("--polytope", choices=["simplex", "polygon"],
                       default="simplex")
    train.add_argument("--epochs", type=int, default=30)
    train.add_argument("--lr", type=float, default=0.1)
    train.add_argument("--momentum", type=float, default=0.9)
    train.add_argument("--wd", type=float, default=5e-4)
    train.add_argument("--batch-size", type=int, default=128)
    train.add_argument("--lr-schedule", type=_schedule_arg, default=(),
                       help="epoch:rate drops, e.g. 70:0.01,90:0.001")
    train.add_argument("--hidden", type=_int_list_arg, default=(64, 32),
                       help="comma-separated hidden layer widths")
    train.add_argument("--init", choices=[m.value for m in InitMode],
                       default=InitMode.SAME_SEED.value)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--eval-classes", type=int, default=2,
                       help="classes held out for open-set evaluation")
    train.add_argument("--pairs-pos", type=int, default=3000)
    train.add_argument("--pairs-neg", type=int, default=3000)
    train.add_argument("--model-selection", action="store_true",
                       help="pick each step's epoch by the compatibility rule")
    train.add_argument("--ms-metric", choices=[METRIC_VERIFICATION, METRIC_MAP],
                       default=METRIC_VERIFICATION)
    train.add_argument("--l2-lambda", type=float, default=1.0)
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--force", action="store_true",
                       help="overwrite an existing run directory")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a stored run, no retraining")
    ev.add_argument("--run", required=True, help="run directory from train")
    ev.add_argument("--metric", choices=[METRIC_VERIFICATION, METRIC_MAP],
                    default=METRIC_VERIFICATION)
    ev.add_argument("--pairs-pos", type=int, default=3000)
    ev.add_argument("--pairs-neg", type=int, default=3000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--json", action="store_true", help="print the JSON report")
    ev.add_argument("--table", action="store_true", help="print the text matrix")
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="run a bundled experiment preset")
    rep.add_argument("--preset", help="preset name (see --list)")
    rep.add_argument("--out", help="output directory")
    rep.add_argument("--force", action="store_true",
                     help="overwrite existing preset results")
    rep.add_argument("--list", action="store_true", help="list bundled presets")
    rep.set_defaults(func=cmd_report)
    return parser


def cmd_gen_data(args) -> int:
    if not args.out:
        raise MissingArgumentError("--out is required")
    use_idx = args.idx_images is not None or args.idx_labels is not None
    if use_idx:
        if not (args.idx_images and args.idx_labels):
            raise MissingArgumentError(
                "IDX input needs both --idx-images and --idx-labels"
            )
        dataset = load_idx(args.idx_images, args.idx_labels)
    else:
        missing = [flag for flag, value in (
            ("--classes", args.classes),
            ("--per-class", args.per_class),
            ("--dim", args.dim),
        ) if value is None]
        if missing:
            raise MissingArgumentError(f"{', '.join(missing)} required for blobs")
        dataset = gen_blobs(args.classes, args.per_class, args.dim,
                            args.spread, args.seed)
    gallery = FeatureGallery(RAW_DATA_MODEL_ID, dataset.labels, dataset.samples)
    digest = write_gallery(args.out, gallery)
    print(f"{args.out}: {dataset.num_samples} rows, "
          f"{dataset.num_classes} classes, dim {dataset.input_dim}, "
          f"sha256 {digest}")
    return 0


def load_dataset(path) -> LabeledSet:
    """Read a gen-data file back into a labeled sample set."""
    gallery = read_gallery(path)
    return LabeledSet(gallery.features, gallery.labels)


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    train_set, eval_set = split_eval_classes(dataset, args.eval_classes, args.seed)
    config = TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.wd,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr_schedule=args.lr_schedule,
        init_mode=InitMode(args.init),
    )
    timeline = build_timeline(
        train_set,
        fractions=args.fractions,
        mode=TimelineMode(args.mode),
        method=Method(args.method),
        seed=args.seed,
        config=config,
    )
    protocol = build_eval_protocol(eval_set, n_pos=args.pairs_pos,
                                   n_neg=args.pairs_neg, seed=args.seed)
    num_outputs = args.k if args.k is not None else train_set.num_classes
    if args.polytope == "polygon":
        classifier = polygon_prototypes(num_outputs)
    else:
        classifier = dsimplex_prototypes(num_outputs)
    command_line = "cores " + shlex.join(sys.argv[1:]) if sys.argv else "cores"
    result = run_timeline(
        timeline,
        classifier,
        protocol,
        out_dir=args.out,
        seed=args.seed,
        hidden_dims=args.hidden,
        model_selection=args.model_selection,
        ms_metric=args.ms_metric,
        l2_lambda=args.l2_lambda,
        force=args.force,
        extra_manifest={"command_line": command_line},
    )
    steps = result.manifest["steps"]
    print(f"{args.out}: {len(steps)} steps trained with {args.method}")
    for entry in steps:
        chosen = ""
        if entry["selected_epoch"] is not None:
            flag = "ok" if entry["ms_constraint_satisfied"] else "fallback"
            chosen = f", epoch {entry['selected_epoch']} ({flag})"
        print(f"  step {entry['step']}: {entry['classes_total']} classes"
              f"{chosen}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    manifest = read_manifest(run_dir)
    pairs = None
    if args.metric == METRIC_VERIFICATION:
        first = sorted(manifest["steps"], key=lambda s: s["step"])[0]
        query = read_gallery(run_dir / first["query_gallery"])
        gallery = read_gallery(run_dir / first["gallery_gallery"])
        pairs = make_verification_pairs(
            query.labels, args.pairs_pos, args.pairs_neg, args.seed,
            gallery_labels=gallery.labels,
        )
    matrix = build_compatibility_matrix(run_dir, args.metric, pairs=pairs)
    report = build_report(matrix)
    want_table = args.table or not args.json
    if want_table:
        print(render_matrix_table(report), end="")
    if args.json:
        from .gallery import manifest_digest

        print(json.dumps(report_to_json_dict(report, manifest_digest(run_dir)),
                         sort_keys=True, indent=1))
    return 0


def cmd_report(args) -> int:
    if args.list:
        for name in sorted(BUILTIN_PRESETS):
            preset = BUILTIN_PRESETS[name]
            print(f"{name}: {len(preset.fractions)} steps, "
                  f"methods {','.join(preset.methods)}, "
                  f"{len(preset.seeds)} seeds")
        return 0
    if not args.preset or not args.out:
        raise MissingArgumentError("--preset and --out are required")
    preset = get_preset(args.preset)
    result = run_preset(preset, args.out, force=args.force)
    print(f"{args.out}: preset {preset.name} complete")
    for row in result.aggregate:
        print(f"  {row.method}: AC {row.ac_mean:.4f} +- {row.ac_std:.4f}, "
              f"AM {row.am_mean:.4f} +- {row.am_std:.4f} "
              f"({row.num_seeds} seeds)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except CoresError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
