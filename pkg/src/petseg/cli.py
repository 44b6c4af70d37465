"""Command-line entry point.

Exit codes: 0 success, 1 I/O error, 2 usage or configuration error,
3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from . import phantom, report, training, unet
from .volume_io import LabelMap, NiftiError, Volume, read_nifti, write_nifti

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3

log = logging.getLogger("petseg")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> cfgmod.RunConfig:
    try:
        return cfgmod.load(args.config)
    except cfgmod.ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _subjects(manifest) -> list[phantom.SubjectRecord]:
    try:
        return phantom.load_manifest(manifest)
    except OSError as exc:
        raise CliError(f"cannot read manifest {manifest}: {exc.strerror or exc}", EXIT_IO) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_IO) from None


def _select(subjects, cfg: cfgmod.RunConfig, which: str):
    if which == "all":
        return subjects
    parts = dict(zip(("train", "val", "test"), training.split(subjects, cfg.train.split_fractions, cfg.train.seed)))
    return parts[which]


def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.n < 1:
        args.parser.error(f"--n must be >= 1, got {args.n}")
    if not 0.0 <= args.prevalence <= 1.0:
        args.parser.error(f"--prevalence must lie in [0, 1], got {args.prevalence}")
    cohort = phantom.generate_cohort(args.n, args.prevalence, cfg.phantom, args.seed)
    try:
        phantom.save_cohort(cohort, args.out)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    pos = sum(s.amyloid_positive for s in cohort)
    dims = "x".join(str(d) for d in cfg.phantom.dims)
    print(f"generated n={len(cohort)} positives={pos} dims={dims} manifest={Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    subjects = _subjects(args.manifest)
    try:
        train_set, val_set, test_set = training.split(subjects, cfg.train.split_fractions, cfg.train.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.weights"
    tc = replace(cfg.train, checkpoint=str(ckpt))
    model = unet.build(cfg.model, seed=cfg.train.seed)
    try:
        model, history = training.train(model, train_set, val_set, tc)
    except training.NonFiniteLossError as exc:
        raise CliError(str(exc), EXIT_NONFINITE) from None
    (out / "history.csv").write_text(history.to_csv())
    (out / "split.tsv").write_text(
        "".join(f"{s.id}\t{name}\n" for name, part in (("train", train_set), ("val", val_set), ("test", test_set)) for s in part)
    )
    best = history.val_loss[history.best_epoch - 1]
    print(
        f"best_epoch={history.best_epoch} best_val_loss={best!r} "
        f"stopped_epoch={history.stopped_epoch} stop_reason={history.stop_reason}"
    )
    return EXIT_OK


def _load_model(path, cfg: cfgmod.RunConfig):
    try:
        return unet.load_weights(path, cfg.model)
    except unet.ConfigMismatchError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except unet.WeightFileError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    except OSError as exc:
        raise CliError(f"cannot read weights {path}: {exc.strerror or exc}", EXIT_IO) from None


def cmd_segment(args) -> int:
    model = _load_model(args.weights, _config(args))
    if model.config.num_classes != 31 or model.config.in_channels != 1:
        raise CliError(f"weights are for {model.config}, segmentation needs 1 input / 31 classes", EXIT_CONFIG)
    try:
        pet = read_nifti(args.pet)
    except (OSError, NiftiError) as exc:
        raise CliError(str(exc), EXIT_IO) from None
    if isinstance(pet, LabelMap):
        pet = Volume(pet.data.astype("float32"), pet.spacing_mm, pet.orientation)
    try:
        labels = training.predict(model, pet)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    labels.orientation = pet.orientation
    try:
        write_nifti(labels, args.out)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    print(f"wrote {args.out} dims={'x'.join(map(str, labels.dims))}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    subjects = _select(_subjects(args.manifest), cfg, args.split)
    table = cfg.regions()
    if args.truth_as_prediction:
        preds = [s.labels for s in subjects]
    else:
        if not args.weights:
            args.parser.error("--weights is required unless --truth-as-prediction is given")
        model = _load_model(args.weights, cfg)
        preds = [training.predict(model, s.pet) for s in subjects]
    try:
        rep = training.evaluate_predictions(subjects, preds, table, cfg.threshold)
    except ValueError as exc:
        raise CliError(f"evaluation failed: {exc}", EXIT_IO) from None
    report.write_report(rep, table, args.out_dir)
    c = rep.classification
    print(
        f"subjects={len(subjects)} macro_dice={rep.dice.macro:.4f} auc={rep.roc_pred.auc:.4f} "
        f"accuracy={c.accuracy:.4f} threshold={cfg.threshold!r}"
    )
    return EXIT_OK


def cmd_config_dump(args) -> int:
    sys.stdout.write(cfgmod.dumps(_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petseg", description="PET-only brain segmentation and amyloid quantification")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a phantom cohort as NIfTI pairs plus manifest")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--prevalence", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate, parser=g)

    t = sub.add_parser("train", help="split a manifest, train with early stopping")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train, parser=t)

    s = sub.add_parser("segment", help="predict a label map for one PET volume")
    s.add_argument("--weights", required=True)
    s.add_argument("--pet", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_segment, parser=s)

    e = sub.add_parser("evaluate", help="Dice, NRMSE, SUVR ROC and accuracy on a split")
    e.add_argument("--weights")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--config")
    e.add_argument("--truth-as-prediction", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_evaluate, parser=e)

    c = sub.add_parser("config", help="configuration utilities")
    csub = c.add_subparsers(dest="action", required=True)
    d = csub.add_parser("dump", help="print the effective configuration in canonical form")
    d.add_argument("--config")
    d.set_defaults(func=cmd_config_dump, parser=d)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"petseg: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
