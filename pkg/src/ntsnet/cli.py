"""``nts`` command line: synth, train, eval, propose, gradcheck.

Exit codes: 0 success, 1 gradient check above tolerance, 2 configuration
error, 3 numerical failure, 4 checkpoint mismatch, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .config import CONFIG_DIR, ConfigError, RunConfig, load_config
from .diffcore import CheckpointError, NumericalError, check_compatible, grad_check, load_checkpoint, save_checkpoint
from .geometry import Proposal, proposals_to_csv
from .synthdata import SynthError, generate_dataset, load_dataset, read_pgm, save_dataset, write_pgm
from .trainer import NonFiniteLossError, NTSModel, evaluate, train

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECKPOINT, EXIT_IO = 0, 1, 2, 3, 4, 5
GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("ntsnet")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: int, message: str):
    raise CommandError(code, message)


def _workers() -> int:
    raw = os.environ.get("NTS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        _fail(EXIT_CONFIG, f"NTS_THREADS must be a positive integer, got {raw!r}")
    return n


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, KeyError, ValueError) as exc:
        _fail(EXIT_IO, f"cannot read dataset at {path}: {exc}")


def _model_and_params(cfg: RunConfig, n_classes: int, checkpoint) -> tuple[NTSModel, object]:
    model = NTSModel(cfg.train, n_classes)
    try:
        params = load_checkpoint(checkpoint)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read checkpoint {checkpoint}: {exc}")
    except CheckpointError as exc:
        _fail(EXIT_CHECKPOINT, f"{checkpoint}: {exc}")
    try:
        check_compatible(params, model.init_params())
    except CheckpointError as exc:
        _fail(EXIT_CHECKPOINT, f"{checkpoint}: {exc}")
    return model, params


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(args.out or cfg.paths.dataset)
    train_set, test_set = generate_dataset(cfg.synth)
    try:
        save_dataset(out, cfg.synth, train_set, test_set)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write dataset to {out}: {exc}")
    hist = Counter(s.label for s in train_set)
    print(f"wrote {len(train_set)} train + {len(test_set)} test samples to {out}")
    print("train class histogram: " + " ".join(f"{c}:{hist[c]}" for c in range(cfg.synth.n_classes)))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    synth, train_set, test_set = _load_data(cfg.paths.dataset)
    report = Path(args.out or cfg.paths.report)
    checkpoint = Path(args.checkpoint or cfg.paths.checkpoint)
    try:
        report.mkdir(parents=True, exist_ok=True)
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(EXIT_IO, f"cannot create output directories: {exc}")
    try:
        result = train(
            train_set,
            cfg.train,
            test_set,
            checkpoint_dir=report / "checkpoints",
            history_path=report / "history.jsonl",
            n_classes=synth.n_classes,
        )
    except NonFiniteLossError as exc:
        _fail(EXIT_NUMERICAL, str(exc))
    save_checkpoint(checkpoint, result.params)
    (report / "initial_metrics.json").write_text(json.dumps(result.initial_metrics, sort_keys=True) + "\n")
    print(f"checkpoint: {checkpoint}")
    print(f"history: {report / 'history.jsonl'} ({len(result.history)} epochs, NMS shortfall {result.shortfall})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    synth, _, test_set = _load_data(cfg.paths.dataset)
    model, params = _model_and_params(cfg, synth.n_classes, args.checkpoint or cfg.paths.checkpoint)
    metrics = evaluate(test_set, params, model, workers=_workers())
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def annotate(image: np.ndarray, proposals: list[Proposal]) -> np.ndarray:
    """Copy of a (H, W[, C]) image with one rectangle outline per proposal.

    Rank 1 is drawn last and brightest (1.0); later ranks step down to 0.4.
    Outlines cover pixel columns floor(x_min)..ceil(x_max)-1 and the
    matching rows.
    """
    out = np.array(image, dtype=np.float32, copy=True)
    if out.ndim == 3:
        out = out[:, :, 0]
    h, w = out.shape
    k = len(proposals)
    for rank in reversed(range(k)):
        r = proposals[rank].region
        level = 1.0 - 0.6 * rank / max(k - 1, 1)
        x0, y0 = max(int(math.floor(r.x_min)), 0), max(int(math.floor(r.y_min)), 0)
        x1, y1 = min(int(math.ceil(r.x_max)), w) - 1, min(int(math.ceil(r.y_max)), h) - 1
        out[y0, x0 : x1 + 1] = level
        out[y1, x0 : x1 + 1] = level
        out[y0 : y1 + 1, x0] = level
        out[y0 : y1 + 1, x1] = level
    return out


def cmd_propose(cfg: RunConfig, args) -> int:
    if args.image is None:
        _fail(EXIT_CONFIG, "propose needs an image path")
    try:
        image = read_pgm(args.image)
    except (OSError, ValueError) as exc:
        _fail(EXIT_IO, f"cannot read image {args.image}: {exc}")
    side = cfg.train.input_side
    if image.shape[:2] != (side, side):
        _fail(EXIT_CONFIG, f"image is {image.shape[1]}x{image.shape[0]}, model expects {side}x{side}")
    model, params = _model_and_params(cfg, cfg.synth.n_classes, args.checkpoint or cfg.paths.checkpoint)
    probs, proposals, region_probs = model.infer(params, image[None])
    predicted = int(np.argmax(probs[0]))
    top = proposals[0][: cfg.train.n_scrutinized]
    for p, rp in zip(top, region_probs[0]):
        p.confidence = float(rp[predicted])
    out = Path(args.out or cfg.paths.report)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "proposals.csv").write_text(proposals_to_csv(top))
        write_pgm(out / "annotated.ppm", annotate(image, top))
    except OSError as exc:
        _fail(EXIT_IO, f"cannot write to {out}: {exc}")
    print(f"predicted class {predicted}; {len(top)} proposals written to {out}")
    return EXIT_OK


def tiny_gradcheck_report(cfg: RunConfig, corrupt: bool = False, n_coords: int = 200):
    """Gradient check of the full batch loss on a few synthetic samples."""
    train_set, _ = generate_dataset(cfg.synth)
    batch = train_set[: cfg.train.batch_size]
    model = NTSModel(cfg.train, cfg.synth.n_classes, cfg.synth.channels)
    params = model.init_params()
    images = np.stack([s.image for s in batch])
    labels = [s.label for s in batch]

    def corrupt_bias(name, grad):
        # negative control: skew the analytic gradient of the scrutinizer bias
        return grad * 1.5 + 1e-3 if name == "scrutinizer.fc.b" else grad

    return grad_check(
        model.loss_graph(images, labels),
        params,
        n_coords=n_coords,
        seed=cfg.train.seed,
        grad_transform=corrupt_bias if corrupt else None,
    )


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    try:
        report = tiny_gradcheck_report(cfg, corrupt=args.corrupt_gradient)
    except NumericalError as exc:
        _fail(EXIT_NUMERICAL, str(exc))
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_checked} coordinates ({len(report.skipped)} skipped at kinks)")
    return EXIT_OK if report.max_rel_error < GRADCHECK_TOLERANCE else EXIT_GRADCHECK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "propose": cmd_propose,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nts", description="Navigator-teacher-scrutinizer training at desk scale.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("image", nargs="?", help="P5 image for 'propose'")
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="override the training and synthesis seed")
    parser.add_argument("--k", type=int, help="override K, the number of scrutinized regions")
    parser.add_argument("--epochs", type=int, help="override the number of training epochs")
    parser.add_argument("--ablation", choices=["ns-net"], help="disable the navigation loss")
    parser.add_argument("--checkpoint", help="checkpoint path (default from config)")
    parser.add_argument("--out", help="output directory (default from config)")
    parser.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        try:
            path = args.config
            if path is None and args.command == "gradcheck":
                path = CONFIG_DIR / "tiny.toml"
            cfg = load_config(path).with_overrides(seed=args.seed, k=args.k, ablation=args.ablation, epochs=args.epochs)
        except OSError as exc:
            _fail(EXIT_IO, f"cannot read config: {exc}")
        except (ConfigError, SynthError) as exc:
            _fail(EXIT_CONFIG, f"invalid configuration: {exc}")
        return COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        print(f"nts {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
