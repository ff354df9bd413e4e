"""Command-line entry point.

Exit codes: 0 success, 1 runtime error (diagnostic on stderr), 2 usage error.
Every command writes only below its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import write_modality_weights
from .checkpoint import load_checkpoint, read_checkpoint
from .correlation import ModalityPairing
from .errors import ConfigError, CorrSegError
from .metrics import region_masks
from .phantom import PhantomConfig, generate_phantom, joint_histogram, pearson, save_cases
from .pnm import write_pgm, write_ppm
from .trainer import RunConfig, evaluate, parse_run_config, predict, predict_logits, train
from .volume_io import (LabelVolume, MultiModalCase, crop_resize, load_manifest_cases,
                        preprocess_case, split_dataset, write_raw)

log = logging.getLogger("corrseg")

# legend colours: necrotic core red, edema yellow, enhancing green
OVERLAY_COLOURS = {1: (255, 0, 0), 2: (255, 255, 0), 4: (0, 255, 0)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="corrseg", description="Multi-modal correlation segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("make-phantom", help="generate a synthetic correlated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--shape", type=_shape, default=(32, 32, 32))
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("analyze-correlation", help="joint histograms and Pearson per modality pair")
    p.add_argument("--data", required=True, help="manifest file")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=32)

    def model_flags(p):
        p.add_argument("--config", help="key=value run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--lambda", dest="lambda_corr", type=float)
        p.add_argument("--no-fusion", action="store_true")
        p.add_argument("--no-correlation", action="store_true")
        p.add_argument("--pairs")

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override max_epochs")
    model_flags(p)

    p = sub.add_parser("predict", help="write predicted label volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true", help="also write mid-slice PGM/PPM images")

    p = sub.add_parser("evaluate", help="Dice and Hausdorff per case and region")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="also write header.json here")
    return parser


# --- commands ---------------------------------------------------------------

def cmd_make_phantom(args) -> None:
    cfg = PhantomConfig(seed=args.seed, shape=args.shape, n_cases=args.cases, noise_std=args.noise)
    manifest = save_cases(generate_phantom(cfg), args.out)
    print(manifest)


def cmd_analyze_correlation(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for case in load_manifest_cases(args.data):
        for a, b in itertools.combinations(case.modalities, 2):
            hist = joint_histogram(a.data, b.data, bins=args.bins)
            hist.save(out / f"{case.case_id}_{a.modality_tag}_{b.modality_tag}")
            rows.append([case.case_id, a.modality_tag, b.modality_tag,
                         f"{pearson(a.data, b.data):.9f}", f"{hist.off_diagonal_fraction():.6f}"])
    with open(out / "pearson.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "mod_a", "mod_b", "pearson", "offdiag_fraction"])
        w.writerows(rows)


def _run_config(args) -> RunConfig:
    kv = parse_run_config(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if args.lambda_corr is not None:
        kv["lambda_corr"] = repr(args.lambda_corr)
    if args.no_fusion:
        kv["use_fusion"] = "false"
    if args.no_correlation:
        kv["use_correlation"] = "false"
    if args.pairs:
        ModalityPairing.parse(args.pairs)
        kv["pairs"] = args.pairs
    if getattr(args, "epochs", None) is not None:
        kv["max_epochs"] = str(args.epochs)
    return RunConfig.from_mapping(kv)


def cmd_train(args) -> None:
    run = _run_config(args)
    cases = [preprocess_case(c, run.target_shape) for c in load_manifest_cases(args.data)]
    if not cases:
        raise ConfigError(f"{args.data}: no cases")
    by_id = {c.case_id: c for c in cases}
    if run.split_ratio >= 1.0:
        train_cases, val_cases = cases, cases
    else:
        train_ids, val_ids = split_dataset(list(by_id), run.split_ratio, run.train.seed)
        if not train_ids or not val_ids:
            raise ConfigError(f"split {run.split_ratio} of {len(cases)} cases leaves a side empty")
        train_cases = [by_id[i] for i in train_ids]
        val_cases = [by_id[i] for i in val_ids]
    run.network.input_shape = cases[0].shape
    result = train(train_cases, val_cases, run.network, run.train, out_dir=args.out)
    state = result.state
    print(f"{state.stop_reason} after {state.epoch} epochs, best val {state.best_val_loss:.6f} "
          f"at epoch {state.best_epoch}")


def _inference_cases(data, model) -> list[MultiModalCase]:
    """Same preprocessing as training: z-normalize, then fit the trained grid."""
    target = tuple(model.config.input_shape)
    out = []
    for case in load_manifest_cases(data):
        case = preprocess_case(case)
        if case.shape != target:
            case = crop_resize(case, target)
        out.append(case)
    return out


def _grey(slice2d: np.ndarray) -> np.ndarray:
    lo, hi = float(slice2d.min()), float(slice2d.max())
    if hi <= lo:
        return np.zeros(slice2d.shape)
    return (slice2d - lo) / (hi - lo) * 255.0


def write_overlays(out: Path, case: MultiModalCase, pred: LabelVolume) -> None:
    z = case.shape[0] // 2
    values = pred.values[z]
    masks = region_masks(values)
    for region, m in masks.items():
        write_pgm(out / f"{case.case_id}_{region}.pgm", m.astype(np.uint8) * 255)
    base = _grey(np.asarray(case.modalities[0].data[z], dtype=np.float64))
    rgb = np.repeat(base[..., None], 3, axis=2)
    for label, colour in OVERLAY_COLOURS.items():
        rgb[values == label] = colour
    write_ppm(out / f"{case.case_id}_overlay.ppm", rgb)


def cmd_predict(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in _inference_cases(args.data, model):
        pred = predict(model, case)
        write_raw(out / f"{case.case_id}_pred.mmsv", pred.values, labels=True)
        if model.config.use_fusion:
            predict_logits(model, case)
            write_modality_weights(out / f"{case.case_id}_attention.csv",
                                   model.decoder.fusion_weights())
        if args.overlay:
            write_overlays(out, case, pred)


def cmd_evaluate(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, _inference_cases(args.data, model))
    report.write_csv(out / "metrics.csv")
    for region in ("WT", "TC", "ET"):
        dice, hd = report.mean(region)
        print(f"{region} dice {dice:.4f} hd {hd:.4f}")


def cmd_inspect_checkpoint(args) -> None:
    header, arrays = read_checkpoint(args.checkpoint)
    info = dict(header)
    info["n_parameters"] = int(sum(a.size for a in arrays.values()))
    text = json.dumps(info, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "header.json").write_text(text + "\n")


COMMANDS = {
    "make-phantom": cmd_make_phantom,
    "analyze-correlation": cmd_analyze_correlation,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("corrseg: a command is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (CorrSegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
