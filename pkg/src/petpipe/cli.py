"""``petpipe`` command-line interface.

Exit codes: 0 success, 2 parameter errors (including missing inputs and
unwritable outputs), 3 format errors. Set ``PETPIPE_LOG`` to
error/warn/info/debug to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import io as pio
from .cc import DEFAULT_CONNECTIVITY, Connectivity
from .classifier import (
    TracerClass,
    TracerClassifier,
    cross_validate,
    fusion_config,
    pet_features,
    plane_config,
    train_classifier,
)
from .errors import FormatError, GenerationError, ParameterError, TrainingError
from .loss import LossConfig, finite_difference_check, weighted_dice_ce
from .metrics import SegMetrics, evaluate_case
from .mip import Plane, project_mip, resize_to_input, write_pgm
from .phantom import PhantomSpec, degraded_prediction, generate_cohort, generate_phantom
from .postproc import SweepCase, remove_small_components, suv_threshold_mask, sweep, tracer_defaults
from .volume import (
    DEFAULT_CLIP_PERCENTILES,
    BinaryMask,
    VoxelGrid,
    apply_dataset_stats,
    check_same_geometry,
    clamp_nonnegative,
    fit_dataset_stats,
)

log = logging.getLogger("petpipe")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


# ------------------------------------------------------------------ pipeline


@dataclass(frozen=True)
class PipelineResult:
    mask: BinaryMask
    tracer: TracerClass
    probability: float | None
    classified: bool
    suv_threshold: float
    min_cc: float
    metrics: SegMetrics | None = None

    def report(self) -> dict:
        doc = {
            "tracer": self.tracer.label,
            "probability": self.probability,
            "classified": self.classified,
            "suv_threshold": self.suv_threshold,
            "min_cc": self.min_cc,
        }
        if self.metrics is not None:
            m = self.metrics
            doc["metrics"] = {"id": m.case_id, "dice": m.dice, "fpv_ml": m.fpv_ml, "fnv_ml": m.fnv_ml, "empty_gt": m.empty_gt}
        return doc


def run_pipeline(
    pet: VoxelGrid,
    pred: BinaryMask,
    *,
    ct: VoxelGrid | None = None,
    gt: BinaryMask | None = None,
    classifier: TracerClassifier | None = None,
    tracer: TracerClass | str | None = None,
    suv_threshold: float | None = None,
    min_cc: float | None = None,
    cc_size_unit: str = "voxels",
    conn: Connectivity = DEFAULT_CONNECTIVITY,
    case_id: str = "case",
) -> PipelineResult:
    """Classify the tracer (unless given), apply its postprocessing, optionally evaluate.

    Segmentation itself happens elsewhere: ``pred`` is the network's mask.
    """
    check_same_geometry(pet, pred, "PET and prediction")
    if ct is not None:
        check_same_geometry(pet, ct, "PET and CT")
    if gt is not None:
        check_same_geometry(pred, gt, "prediction and ground truth")

    if tracer is not None:
        cls, prob, classified = TracerClass.parse(tracer), None, False
    else:
        if classifier is None:
            raise ParameterError("either a classifier model or an explicit tracer is required")
        cls, prob = classifier.classify(pet)
        classified = True
    defaults = tracer_defaults(cls)
    t = defaults.suv_threshold if suv_threshold is None else suv_threshold
    min_size = defaults.min_cc_voxels if min_cc is None else min_cc
    if t < 0 or min_size < 0:
        raise ParameterError("postprocessing thresholds must be non-negative")
    log.info("tracer %s (p=%s), SUV threshold %.3g, min component %s", cls.label, prob, t, min_size)

    mask = suv_threshold_mask(pred, pet, t)
    if min_size > 0:
        mask = remove_small_components(mask, min_size, conn, cc_size_unit)
    metrics = evaluate_case(mask, gt, conn, case_id) if gt is not None else None
    return PipelineResult(mask, cls, prob, classified, t, min_size, metrics)


# ------------------------------------------------------------------- helpers


def _read_pet(path, args) -> VoxelGrid:
    pet = pio.read_volume(path, args.assume_axes)
    return clamp_nonnegative(pet) if getattr(args, "clamp_nonneg", False) else pet


def _read_mask(path, args) -> BinaryMask:
    labels = pio.read_labels(path, args.assume_axes)
    return BinaryMask(labels.labels > 0, labels.spacing, labels.axes)


def _read_manifest(path, required: Sequence[str]) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ParameterError(f"cannot read manifest {path}: {exc}") from None
    if rows and any(col not in rows[0] for col in required):
        raise FormatError(f"manifest {path} must have columns {', '.join(required)}")
    base = Path(path).parent
    for row in rows:
        for col in required:
            if col not in ("case_id", "tracer") and not Path(row[col]).is_absolute():
                row[col] = str(base / row[col])
    return rows


def _map(fn: Callable, items: Iterable, jobs: int | None) -> list:
    items = list(items)
    if (jobs or 1) <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _parse_thresholds(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ParameterError(f"thresholds must be a comma-separated list of numbers, got {text!r}") from None


def _phantom_pair_seeds(n_cases: int) -> int:
    if n_cases < 2 or n_cases % 2:
        raise ParameterError(f"phantom cohort size must be an even number >= 2, got {n_cases}")
    return n_cases // 2


def phantom_sweep_cases(n_cases: int, seed: int, jobs: int | None = None) -> list[SweepCase]:
    """Phantom cases whose predictions are degraded copies of the ground truth."""
    specs = generate_cohort(_phantom_pair_seeds(n_cases), seed=seed)

    def build(spec: PhantomSpec) -> SweepCase:
        ph = generate_phantom(spec)
        return SweepCase(f"phantom_{spec.rng_seed:05d}", degraded_prediction(ph, spec.rng_seed), ph.gt, ph.pet)

    return _map(build, specs, jobs)


def phantom_features(n_per_class: int, seed: int, jobs: int | None = None) -> list[tuple]:
    def build(spec: PhantomSpec):
        cor, sag = pet_features(generate_phantom(spec).pet)
        return cor, sag, spec.tracer

    return _map(build, generate_cohort(n_per_class, seed=seed), jobs)


# ------------------------------------------------------------------ commands


def cmd_phantom(args) -> int:
    spec = PhantomSpec(TracerClass.parse(args.tracer), lesion_count=args.lesions, rng_seed=args.seed)
    ph = generate_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pio.write_volume(ph.pet, out / "pet.nii.gz")
    pio.write_volume(ph.ct, out / "ct.nii.gz", "int16")
    pio.write_volume(ph.gt, out / "gt.nii.gz")
    pio.write_volume(ph.anatomy, out / "anatomy.nii.gz")
    doc = spec.to_dict()
    doc["anatomy_vocabulary"] = {str(k): v for k, v in ph.anatomy.vocabulary.items()}
    (out / "spec.json").write_text(json.dumps(doc, indent=2) + "\n")
    log.info("wrote phantom to %s", out)
    return 0


def cmd_mip(args) -> int:
    pet = _read_pet(args.pet, args)
    for plane in Plane:
        img = project_mip(pet, plane)
        if args.resize:
            img = resize_to_input(img)
        write_pgm(img, f"{args.out}_{plane.value}.pgm")
    return 0


def cmd_train_classifier(args) -> int:
    if args.manifest:
        rows = _read_manifest(args.manifest, ("pet", "tracer"))

        def build(row):
            cor, sag = pet_features(_read_pet(row["pet"], args))
            return cor, sag, TracerClass.parse(row["tracer"])

        samples = _map(build, rows, args.jobs)
    elif args.phantom_cohort:
        samples = phantom_features(args.phantom_cohort, args.seed, args.jobs)
    else:
        raise ParameterError("train-classifier needs --manifest or --phantom-cohort")
    pcfg, fcfg = plane_config(args.seed), fusion_config(args.seed)
    model = train_classifier(samples, pcfg, fcfg)
    summary: dict = {"n_samples": len(samples)}
    if args.cv:
        summary["cv"] = {
            "coronal": cross_validate([(c, l) for c, _, l in samples], args.cv, pcfg).accuracies,
            "sagittal": cross_validate([(s, l) for _, s, l in samples], args.cv, pcfg).accuracies,
            "fusion": cross_validate([(np.concatenate([c, s]), l) for c, s, l in samples], args.cv, fcfg).accuracies,
        }
    model.metadata = summary
    model.save(args.model)
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return 0


def _load_model(path) -> TracerClassifier:
    if not path:
        raise ParameterError("--model is required unless --tracer is given")
    return TracerClassifier.load(path)


def cmd_classify(args) -> int:
    model = _load_model(args.model)
    cls, prob = model.classify(_read_pet(args.pet, args))
    _emit(json.dumps({"tracer": cls.label, "probability": prob}) + "\n", args.out)
    return 0


def cmd_eval(args) -> int:
    conn = Connectivity.parse(args.connectivity)
    if args.manifest:
        rows = _read_manifest(args.manifest, ("case_id", "pred", "gt"))
    elif args.pred and args.gt:
        rows = [{"case_id": args.case_id, "pred": args.pred, "gt": args.gt}]
    else:
        raise ParameterError("eval needs --pred and --gt, or --manifest")

    def one(row) -> SegMetrics:
        return evaluate_case(_read_mask(row["pred"], args), _read_mask(row["gt"], args), conn, row["case_id"])

    results = _map(one, rows, args.jobs)
    _write_report(results, args)
    return 0


def _write_report(report, args) -> None:
    if args.out:
        pio.write_report(report, args.out, args.format)
    else:
        sys.stdout.write(pio.render_report(report, args.format))


def cmd_postproc(args) -> int:
    pred = _read_mask(args.pred, args)
    mask = pred
    t = args.suv_thresh
    if t is None and args.tracer:
        t = tracer_defaults(TracerClass.parse(args.tracer)).suv_threshold
    if t is not None:
        if not args.pet:
            raise ParameterError("SUV thresholding needs --pet")
        mask = suv_threshold_mask(mask, _read_pet(args.pet, args), t)
    if args.min_cc:
        mask = remove_small_components(mask, args.min_cc, Connectivity.parse(args.connectivity), args.cc_size_unit)
    pio.write_volume(mask, args.out)
    return 0


def cmd_sweep(args) -> int:
    conn = Connectivity.parse(args.connectivity)
    thresholds = _parse_thresholds(args.thresholds)
    if args.manifest:
        cols = ("case_id", "pred", "gt", "pet") if args.kind == "suv" else ("case_id", "pred", "gt")
        rows = _read_manifest(args.manifest, cols)

        def load(row) -> SweepCase:
            pet = _read_pet(row["pet"], args) if row.get("pet") else None
            return SweepCase(row["case_id"], _read_mask(row["pred"], args), _read_mask(row["gt"], args), pet)

        cases = _map(load, rows, args.jobs)
    elif args.phantom_cases:
        cases = phantom_sweep_cases(args.phantom_cases, args.seed, args.jobs)
    else:
        raise ParameterError("sweep needs --manifest or --phantom-cases")
    report = sweep(cases, args.kind, thresholds, conn, args.cc_size_unit)
    _write_report(report, args)
    return 0


def cmd_loss_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = LossConfig(args.classes, args.lam, dice_include_background=args.dice_include_background)
    logits = rng.normal(0.0, 2.0, (args.classes, args.voxels))
    targets = rng.integers(0, args.classes, args.voxels)
    loss, _ = weighted_dice_ce(logits, targets, cfg)
    all_coords = [(c, v) for c in range(args.classes) for v in range(args.voxels)]
    pick = rng.permutation(len(all_coords))[: args.coords]
    err = finite_difference_check(logits, targets, cfg, [all_coords[i] for i in pick])
    doc = {
        "classes": args.classes,
        "voxels": args.voxels,
        "lambda": args.lam,
        "loss": loss,
        "coords_checked": int(len(pick)),
        "max_relative_error": err,
        "passed": bool(err < 1e-4),
    }
    _emit(json.dumps(doc, indent=2) + "\n", args.out)
    return 0


def cmd_normalize(args) -> int:
    rows = _read_manifest(args.manifest, ("pet",))
    grids = [_read_pet(r["pet"], args) for r in rows]
    stats = fit_dataset_stats(grids, args.clip_lo, args.clip_hi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for row, grid in zip(rows, grids):
        name = Path(row["pet"]).name
        pio.write_volume(apply_dataset_stats(grid, stats), out / name)
    (out / "stats.json").write_text(json.dumps(stats.__dict__, indent=2) + "\n")
    return 0


def cmd_pipeline(args) -> int:
    pet = _read_pet(args.pet, args)
    pred = _read_mask(args.pred, args)
    ct = pio.read_volume(args.ct, args.assume_axes) if args.ct else None
    gt = _read_mask(args.gt, args) if args.gt else None
    model = None if args.tracer else _load_model(args.model)
    result = run_pipeline(
        pet,
        pred,
        ct=ct,
        gt=gt,
        classifier=model,
        tracer=args.tracer,
        suv_threshold=args.suv_thresh,
        min_cc=args.min_cc,
        cc_size_unit=args.cc_size_unit,
        conn=Connectivity.parse(args.connectivity),
        case_id=args.case_id,
    )
    if args.out:
        pio.write_volume(result.mask, args.out)
    text = json.dumps(result.report(), indent=2) + "\n"
    _emit(text, args.report)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--assume-axes", metavar="CODE", help="orientation code overriding the file header (e.g. LAS)")
    common.add_argument("--clamp-nonneg", action="store_true", help="set negative PET values to zero on load")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads for batch work")
    common.add_argument("--seed", type=int, default=0)

    conn = argparse.ArgumentParser(add_help=False)
    conn.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=int(DEFAULT_CONNECTIVITY))

    post = argparse.ArgumentParser(add_help=False)
    post.add_argument("--suv-thresh", type=float, help="override the tracer's SUV threshold")
    post.add_argument("--min-cc", type=float, help="remove components smaller than this")
    post.add_argument("--cc-size-unit", choices=("voxels", "ml"), default="voxels")

    report = argparse.ArgumentParser(add_help=False)
    report.add_argument("--format", choices=("json", "csv"), default="json")

    p = argparse.ArgumentParser(prog="petpipe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic PET/CT phantom")
    s.add_argument("--tracer", choices=("fdg", "psma"), required=True)
    s.add_argument("--lesions", type=int, default=3)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("mip", parents=[common], help="write coronal and sagittal MIPs as 16-bit PGM")
    s.add_argument("--pet", required=True)
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--resize", action="store_true", help="resize to the 224x224 classifier input")
    s.set_defaults(func=cmd_mip)

    s = sub.add_parser("train-classifier", parents=[common], help="train the tracer classifier")
    s.add_argument("--manifest", help="CSV with columns pet,tracer")
    s.add_argument("--phantom-cohort", type=int, help="train on N phantoms per tracer instead")
    s.add_argument("--cv", type=int, default=5, help="folds for cross-validation (0 disables)")
    s.add_argument("--model", required=True, help="output model JSON")
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("classify", parents=[common], help="classify the tracer of a PET volume")
    s.add_argument("--pet", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("eval", parents=[common, conn, report], help="Dice / FPV / FNV of predictions")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--case-id", default="case")
    s.add_argument("--manifest", help="CSV with columns case_id,pred,gt")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("postproc", parents=[common, conn, post], help="postprocess a prediction mask")
    s.add_argument("--pred", required=True)
    s.add_argument("--pet")
    s.add_argument("--tracer", choices=("fdg", "psma"), help="use the tracer's default SUV threshold")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_postproc)

    s = sub.add_parser("sweep", parents=[common, conn, report], help="threshold sweep delta table")
    s.add_argument("--kind", choices=("suv", "cc"), required=True)
    s.add_argument("--thresholds", required=True, help="comma-separated, strictly increasing")
    s.add_argument("--manifest", help="CSV with columns case_id,pred,gt[,pet]")
    s.add_argument("--phantom-cases", type=int, help="use N phantom cases with degraded predictions")
    s.add_argument("--cc-size-unit", choices=("voxels", "ml"), default="voxels")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("loss-check", parents=[common], help="finite-difference check of the loss gradient")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--voxels", type=int, default=27)
    s.add_argument("--lambda", dest="lam", type=float, default=3.0)
    s.add_argument("--coords", type=int, default=20)
    s.add_argument(
        "--dice-include-background", action=argparse.BooleanOptionalAction, default=True
    )
    s.add_argument("--out")
    s.set_defaults(func=cmd_loss_check)

    s = sub.add_parser("normalize", parents=[common], help="dataset-level percentile clip + z-score")
    s.add_argument("--manifest", required=True, help="CSV with column pet")
    s.add_argument("--clip-lo", type=float, default=DEFAULT_CLIP_PERCENTILES[0])
    s.add_argument("--clip-hi", type=float, default=DEFAULT_CLIP_PERCENTILES[1])
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("pipeline", parents=[common, conn, post], help="classify, postprocess, evaluate")
    s.add_argument("--pet", required=True)
    s.add_argument("--ct")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt")
    s.add_argument("--model")
    s.add_argument("--tracer", choices=("fdg", "psma"), help="skip classification")
    s.add_argument("--case-id", default="case")
    s.add_argument("--out", help="final mask path")
    s.add_argument("--report", help="report path (default stdout)")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    level = _LOG_LEVELS.get(os.environ.get("PETPIPE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, TrainingError, GenerationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
