"""Command-line entry point: ``wingloss <command> [options]``.

Commands
--------
train      fit a landmark regressor (optionally PDB-balanced, optionally two-stage)
eval       per-sample NME, CED curve and summary table for a checkpoint
balance    pose histogram, shape model and balanced manifest for a dataset
sweep      Wing loss (w, epsilon) grid on the synthetic task
gradcheck  finite-difference gradient report
ced        plot-ready CED CSV and SVG from per-sample NME files

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Settings resolve as defaults < ``--config`` file < ``WINGLOSS_OUTPUT_DIR``
(output directory only) < command-line flags.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import experiments
from .balance import AugmentationConfigError, balance, identity_manifest, materialize
from .config import OUTPUT_ENV, ConfigError, ExperimentConfig
from .data import AnnotationParseError, Dataset, DatasetError, load_manifest
from .eval import (EvalReport, NormalisationRule, ced_curve, ced_svg, format_table, nme_batch,
                   read_per_sample_csv, write_ced_csv)
from .geometry import Crop
from .gradcheck import run_gradcheck
from .net import Network, TrainingDivergedError
from .pipeline import TwoStageLocalizer, clamp_bbox, run_two_stage
from .shapes import ShapeModel, from_vector, to_vector

logger = logging.getLogger("wingloss")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs detected after parsing; exit code 2."""


# --------------------------------------------------------------------------
# configuration plumbing


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_config(args, argv) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg.apply_env()
    for assignment in args.set or []:
        cfg.override(assignment)
    flag_map = {
        "seed": ("experiment", "seed"),
        "output": ("output", "dir"),
        "loss": ("loss", "kind"),
        "w": ("loss", "w"),
        "epsilon": ("loss", "epsilon"),
        "iterations": ("train", "iterations"),
        "dataset": ("dataset", "source"),
        "bins": ("pdb", "bins"),
        "fill": ("pdb", "fill"),
        "rule": ("eval", "rule"),
    }
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(section, key, value)
    if getattr(args, "pdb", False):
        cfg.set("pdb", "enabled", True)
    if getattr(args, "two_stage", False):
        cfg.set("pipeline", "two_stage", True)
    cfg.argv = list(argv)
    return cfg.validate()


def output_dir(cfg) -> str:
    path = cfg["output"]["dir"]
    os.makedirs(path, exist_ok=True)
    return path


def load_dataset(cfg, purpose, n_samples) -> Dataset:
    """Manifest CSV named by ``[dataset] source``, or a synthetic draw."""
    src = cfg["dataset"]["source"]
    if src == "synthetic":
        return experiments.synthetic_from_config(cfg, n_samples, cfg.seed(purpose))
    symmetry = cfg["dataset"]["symmetry"] or None
    if symmetry is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(src)), "symmetry.txt")
        symmetry = sibling if os.path.exists(sibling) else None
    return load_manifest(src, symmetry)


def write_curve(path, curves):
    with open(path, "w") as fh:
        fh.write("stage,iteration,loss\n")
        for stage, curve in curves:
            for it, value in curve:
                fh.write(f"{stage},{it},{value!r}\n")


def write_histogram(path, manifest):
    hist = manifest.histogram
    after = manifest.bin_counts()
    with open(path, "w") as fh:
        fh.write("bin,lower,upper,count,balanced_count\n")
        for k in range(hist.n_bins):
            fh.write(f"{k},{float(hist.edges[k])!r},{float(hist.edges[k + 1])!r},{int(hist.counts[k])},{int(after[k])}\n")


# --------------------------------------------------------------------------
# commands


def cmd_train(args, cfg) -> int:
    out = output_dir(cfg)
    dataset = load_dataset(cfg, "train-data", cfg["dataset"]["n_samples"])
    size = cfg["network"]["input_size"]
    seed = cfg.seed("init") % 2**31

    manifest = identity_manifest(dataset)
    if cfg["pdb"]["enabled"]:
        model = ShapeModel(pose_component=cfg["pdb"]["pose_component"]).fit(dataset.shapes)
        manifest = balance(dataset, model, cfg["pdb"]["bins"], rng_seed=cfg.seed("pdb-balance") % 2**31,
                           fill=cfg["pdb"]["fill"],
                           augmentation=experiments.augmentation_from_config(cfg))
        model.save(os.path.join(out, "shape_model.txt"))
        manifest.save(os.path.join(out, "manifest.txt"))
        logger.info("PDB: %d samples -> %d entries", len(dataset), len(manifest.entries))

    if cfg["pipeline"]["two_stage"]:
        stage1_data = materialize(dataset, manifest, size) if cfg["pdb"]["enabled"] else None
        loc = TwoStageLocalizer(
            stage1=experiments.regressor_from_config(cfg, seed=seed),
            stage2=experiments.regressor_from_config(cfg, seed=seed + 1),
            input_size1=size, input_size2=cfg["pipeline"]["input_size2"],
            margin=cfg["pipeline"]["margin"], stage2_rotation=cfg["pipeline"]["stage2_rotation"],
            random_state=cfg.seed("stage2-data") % 2**31,
        ).fit(dataset, stage1_data=stage1_data)
        loc.stage1_.network_.save(os.path.join(out, "checkpoint.wnet"))
        loc.stage2_.network_.save(os.path.join(out, "stage2.wnet"))
        np.savetxt(os.path.join(out, "mean_shape.txt"), to_vector(loc.mean_)[None], fmt="%.17g")
        curves = [("1", loc.stage1_.loss_curve_), ("2", loc.stage2_.loss_curve_)]
    else:
        X, Y = materialize(dataset, manifest, size)
        est = experiments.regressor_from_config(cfg, seed=seed).fit(X, Y)
        est.network_.save(os.path.join(out, "checkpoint.wnet"))
        curves = [("1", est.loss_curve_)]

    write_curve(os.path.join(out, "curve.csv"), curves)
    cfg.save(os.path.join(out, "config.ini"))
    final = curves[-1][1][-1][1] if curves[-1][1] else float("nan")
    print(f"trained {cfg['loss']['kind']} on {len(manifest.entries)} samples; final loss {final:.6g}")
    print(f"outputs in {out}")
    return EXIT_OK


def predict_dataset(net1, dataset, net2=None, mean=None, margin=0.2):
    preds = []
    for image, box in zip(dataset.images, dataset.bboxes):
        if net2 is not None:
            preds.append(run_two_stage(net1, net2, image, box, mean, margin).landmarks)
            continue
        crop = Crop.from_bbox(clamp_bbox(box, image.shape))
        x = crop.sample(image, net1.input_shape[0])
        preds.append(crop.to_image(from_vector(net1.predict(x))))
    return np.array(preds)


def cmd_eval(args, cfg) -> int:
    out = output_dir(cfg)
    for path in filter(None, (args.checkpoint, args.stage2, args.mean)):
        if not os.path.exists(path):
            raise UsageError(f"file not found: {path}")
    if (args.stage2 is None) != (args.mean is None):
        raise UsageError("--stage2 and --mean must be given together")
    net1 = Network.load(args.checkpoint)
    net2 = Network.load(args.stage2) if args.stage2 else None
    mean = from_vector(np.loadtxt(args.mean)) if args.mean else None
    dataset = load_dataset(cfg, "eval-data", cfg["dataset"]["eval_samples"])
    rule = NormalisationRule.parse(cfg["eval"]["rule"])

    preds = predict_dataset(net1, dataset, net2, mean, cfg["pipeline"]["margin"])
    nmes = nme_batch(preds, dataset.shapes, rule, dataset.bboxes)
    report = EvalReport.from_nmes(nmes, ids=list(dataset.ids))
    report.write_per_sample_csv(os.path.join(out, "per_sample.csv"))
    report.write_ced_csv(os.path.join(out, "ced.csv"))
    summary = report.summary()
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(summary + "\n")
    cfg.save(os.path.join(out, "config.ini"))
    print(summary)
    return EXIT_OK


def cmd_balance(args, cfg) -> int:
    out = output_dir(cfg)
    dataset = load_dataset(cfg, "train-data", cfg["dataset"]["n_samples"])
    model = ShapeModel(pose_component=cfg["pdb"]["pose_component"]).fit(dataset.shapes)
    manifest = balance(dataset, model, cfg["pdb"]["bins"], rng_seed=cfg.seed("pdb-balance") % 2**31,
                       fill=cfg["pdb"]["fill"], augmentation=experiments.augmentation_from_config(cfg))
    manifest.save(os.path.join(out, "manifest.txt"))
    model.save(os.path.join(out, "shape_model.txt"))
    write_histogram(os.path.join(out, "histogram.csv"), manifest)
    cfg.save(os.path.join(out, "config.ini"))
    hist = manifest.histogram
    rows = [(k, f"{hist.edges[k]:.4g}", f"{hist.edges[k + 1]:.4g}", int(hist.counts[k]), int(c))
            for k, c in enumerate(manifest.bin_counts())]
    print(format_table(["bin", "lower", "upper", "count", "balanced"], rows))
    print(f"{len(dataset)} samples, {manifest.n_duplicates} duplicates added")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    out = output_dir(cfg)
    if cfg["dataset"]["source"] != "synthetic":
        raise UsageError("sweep runs on the synthetic task only")
    result = experiments.wing_sweep(
        cfg["experiment"]["seed"], ws=args.ws, epsilons=args.epsilons, cfg=cfg,
        n_train=cfg["dataset"]["n_samples"], n_test=cfg["dataset"]["eval_samples"],
        iterations=cfg["train"]["iterations"],
    )
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write(result.csv())
    table = result.table()
    with open(os.path.join(out, "sweep.txt"), "w") as fh:
        fh.write(table + "\n")
    cfg.save(os.path.join(out, "config.ini"))
    print(table)
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    results = run_gradcheck(cfg["experiment"]["seed"], loss_tol=args.loss_tol, net_tol=args.net_tol,
                            corrupt=args.corrupt)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_ced(args, cfg) -> int:
    out = output_dir(cfg)
    labels = args.labels.split(",") if args.labels else [
        os.path.basename(os.path.dirname(os.path.abspath(p))) or p for p in args.inputs
    ]
    if len(labels) != len(args.inputs):
        raise UsageError("--labels must name every input")
    per_input = []
    for path in args.inputs:
        if not os.path.exists(path):
            raise UsageError(f"file not found: {path}")
        per_input.append(read_per_sample_csv(path)[1])
    top = args.max_threshold or max(float(np.max(v)) for v in per_input)
    thresholds = np.linspace(0.0, top, args.points)
    curves = []
    for label, nmes in zip(labels, per_input):
        t, f = ced_curve(nmes, thresholds)
        write_ced_csv(os.path.join(out, f"ced_{label}.csv"), t, f)
        curves.append((label, t, f))
    with open(os.path.join(out, "ced.svg"), "w") as fh:
        fh.write(ced_svg(curves))
    for label, t, f in curves:
        print(f"{label}: fraction <= {t[-1]:.4g} is {f[-1]:.4f}")
    print(f"wrote {len(curves)} CED CSV file(s) and ced.svg to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value settings file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="manifest CSV path, or 'synthetic'")

    parser = argparse.ArgumentParser(prog="wingloss", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common, data], help="train a regressor")
    p.add_argument("--loss", choices=["l2", "l1", "smooth_l1", "wing"])
    p.add_argument("--w", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--pdb", action="store_true", help="enable pose-based data balancing")
    p.add_argument("--bins", type=int)
    p.add_argument("--fill", choices=["max", "mean"])
    p.add_argument("--two-stage", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage2", help="second-stage checkpoint (two-stage evaluation)")
    p.add_argument("--mean", help="mean shape file written by two-stage training")
    p.add_argument("--rule", help="bbox, inter_pupil:L/R or inter_ocular:L/R")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("balance", parents=[common, data], help="pose-based data balancing")
    p.add_argument("--bins", type=int)
    p.add_argument("--fill", choices=["max", "mean"])
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("sweep", parents=[common], help="Wing (w, epsilon) grid")
    p.add_argument("--ws", type=_floats, default=experiments.SWEEP_W)
    p.add_argument("--epsilons", type=_floats, default=experiments.SWEEP_EPSILON)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--loss-tol", type=float, default=1e-5)
    p.add_argument("--net-tol", type=float, default=1e-4)
    p.add_argument("--corrupt", metavar="CHECK",
                   help="scale one analytic gradient by 1.5 to exercise failure reporting")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ced", parents=[common], help="CED CSV + SVG from per-sample NME files")
    p.add_argument("inputs", nargs="+", help="per_sample.csv files written by eval")
    p.add_argument("--labels", help="comma-separated curve labels")
    p.add_argument("--max-threshold", type=float)
    p.add_argument("--points", type=int, default=101)
    p.set_defaults(func=cmd_ced)
    return parser


USAGE_ERRORS = (UsageError, ConfigError, DatasetError, AnnotationParseError, AugmentationConfigError,
                FileNotFoundError)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args, argv)
        return args.func(args, cfg)
    except USAGE_ERRORS as exc:
        print(f"wingloss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"wingloss {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        logger.debug("unhandled error", exc_info=True)
        print(f"wingloss {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
