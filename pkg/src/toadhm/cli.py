"""Command-line entry point: synth, train, eval, predict and overlay.

Every run is driven by one YAML config (see ``configs/``) with a few flag
overrides.  Exit codes: 0 success, 2 input error, 3 artifact/state error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import yaml

from .augment import AugmentConfig, augment_pair
from .data import LABELS, DatasetError, load_manifest, read_image, synth_records, write_dataset
from .evaluation import (
    DEFAULT_THRESHOLD, TEST_CROP, center_crop, classify, evaluate_records, overlay, predict_image, write_report,
)
from .losses import LossConfig
from .model import BackboneConfig, CheckpointError, load_checkpoint
from .train import (
    TrainConfig, TrainingError, epoch_order, run_training, sample_seed, split_dataset, split_losses,
)

log = logging.getLogger("toadhm")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ARTIFACT = 3


class InputError(ValueError):
    """Bad config, flag or missing input; maps to exit code 2."""


@dataclass
class SynthConfig:
    train_counts: dict = field(default_factory=lambda: {"toad": 66, "not_toad": 669})
    test_counts: dict = field(default_factory=lambda: {"toad": 157, "not_toad": 243})
    seed: int = 1
    shape: tuple[int, int] = (720, 1280)
    frames_per_clip: int = 300

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        for name in ("train_counts", "test_counts"):
            counts = getattr(self, name)
            unknown = set(counts) - set(LABELS)
            if unknown:
                raise InputError(f"synth.{name}: unknown labels {sorted(unknown)}")
            if any(int(v) < 0 for v in counts.values()):
                raise InputError(f"synth.{name}: counts must be >= 0")


@dataclass
class EvalConfig:
    crop: tuple[int, int] = TEST_CROP
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        self.crop = tuple(int(v) for v in self.crop)
        if not 0.0 <= self.threshold <= 1.0:
            raise InputError("eval.threshold must lie in [0, 1]")


@dataclass
class RunConfig:
    dataset: str = "data/train"
    test_dataset: str = "data/test"
    out: str = "runs/default"
    synth: SynthConfig = field(default_factory=SynthConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = {"synth": SynthConfig, "augment": AugmentConfig, "backbone": BackboneConfig,
                "loss": LossConfig, "train": TrainConfig, "eval": EvalConfig}

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = dict(doc or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            section = cls.SECTIONS.get(key)
            if section is None:
                kwargs[key] = str(value)
                continue
            value = dict(value or {})
            bad = set(value) - set(section.__dataclass_fields__)
            if key == "train":
                bad |= {"loss"} & set(value)
            if bad:
                raise InputError(f"unknown keys in '{key}': {sorted(bad)}")
            try:
                kwargs[key] = section(**value)
            except InputError:
                raise
            except (TypeError, ValueError) as exc:
                raise InputError(f"invalid '{key}' section: {exc}") from exc
        cfg = cls(**kwargs)
        cfg.train.loss = cfg.loss
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise InputError(f"cannot parse {path}: {exc}") from exc
        if doc is not None and not isinstance(doc, dict):
            raise InputError(f"{path}: top level must be a mapping")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("loss")
        synth = dict(vars(self.synth), shape=list(self.synth.shape))
        return {
            "dataset": self.dataset, "test_dataset": self.test_dataset, "out": self.out,
            "synth": synth, "augment": self.augment.to_dict(), "backbone": self.backbone.to_dict(),
            "loss": self.loss.to_dict(), "train": train,
            "eval": {"crop": list(self.eval.crop), "threshold": self.eval.threshold},
        }


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "loss", None) is not None or getattr(args, "wt", None) is not None:
        kind = args.loss or cfg.loss.kind
        wt = args.wt if args.wt is not None else (cfg.loss.W_t if kind == cfg.loss.kind else 100.0)
        try:
            cfg.loss = LossConfig(kind=kind, W_t=wt, epsilon=cfg.loss.epsilon)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        cfg.train.loss = cfg.loss
    if getattr(args, "threshold", None) is not None:
        cfg.eval = EvalConfig(cfg.eval.crop, args.threshold)
    return cfg


def _dump_yaml(cfg: RunConfig, path: Path):
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.synth.seed = args.seed
    train_root = Path(args.out) / "train" if args.out else Path(cfg.dataset)
    test_root = Path(args.out) / "test" if args.out else Path(cfg.test_dataset)
    counts = cfg.synth.train_counts
    if min(int(counts.get(label, 0)) for label in LABELS) < 1:
        raise InputError("both classes required in synth.train_counts")
    for root, split, c in ((train_root, "train", counts), (test_root, "test", cfg.synth.test_counts)):
        if not sum(int(v) for v in c.values()):
            continue
        if root.exists() and any(root.iterdir()):
            raise InputError(f"refusing to write into non-empty directory {root}")
        records = synth_records(c, cfg.synth.seed, cfg.synth.shape, split, cfg.synth.frames_per_clip)
        manifest = write_dataset(root, records, cfg.train.split_seed)
        print(f"{split}: {manifest.counts} -> {root}")
    return EXIT_OK


def _write_trace(path: Path, records, cfg: RunConfig, n: int = 8):
    """Augmentation trace of the first training samples as seen at epoch 0."""
    train_refs, _ = split_dataset(records, cfg.train.split_ratio, cfg.train.split_seed)
    order = epoch_order(len(train_refs), 0, cfg.train.split_seed)
    with open(path, "w") as fh:
        for ref in (train_refs[i] for i in order[:n]):
            seed = sample_seed(cfg.train.split_seed, 0, ref.record_id)
            sample = augment_pair(ref.load(), seed, cfg.augment, trace=True)
            fh.write(json.dumps({"record": ref.record_id, "seed": seed, "trace": sample.trace},
                                default=lambda o: np.asarray(o).tolist()) + "\n")


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.train.split_seed = cfg.train.torch_seed = cfg.train.head_seed = args.seed
    dataset = Path(args.dataset or cfg.dataset)
    out = Path(args.out or cfg.out)
    if not dataset.exists():
        raise InputError(f"dataset not found: {dataset}")
    manifest = load_manifest(dataset, cfg.train.split_seed)
    out.mkdir(parents=True, exist_ok=True)
    _dump_yaml(cfg, out / "config.yaml")
    if args.trace:
        _write_trace(out / "augment_trace.jsonl", manifest.records, cfg)
    model, history = run_training(manifest, cfg.train, cfg.augment, cfg.backbone, out_dir=out,
                                  provenance={"dataset": str(dataset), "counts": manifest.counts})
    best = history.best_entry()
    train_loss, val_loss = split_losses(model, manifest, cfg.train, cfg.augment)
    summary = {"epochs": len(history.epochs), "best_epoch": best.epoch,
               "best_val_loss": best.val_loss, "running_train_loss": best.train_loss,
               "train_loss": train_loss, "val_loss": val_loss,
               "relative_gap": abs(val_loss - train_loss) / train_loss}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"best epoch {best.epoch}: train {train_loss:.5f} val {val_loss:.5f} -> {out / 'best'}")
    return EXIT_OK


def _checkpoint(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    return path


def _save_png(path: Path, image: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), image):
        raise OSError(f"cannot write {path}")


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(_checkpoint(args.checkpoint))
    dataset = Path(args.dataset or cfg.test_dataset)
    if not dataset.exists():
        raise InputError(f"dataset not found: {dataset}")
    manifest = load_manifest(dataset, validate=False)
    if not len(manifest):
        raise InputError(f"no images under {dataset}")
    crop = cfg.eval.crop
    overlay_dir = Path(args.overlay_dir) if args.overlay_dir else None

    def on_heatmap(record, score, heatmap):
        if overlay_dir is None or record.label != "toad" or classify(score, cfg.eval.threshold) != "toad":
            return
        _save_png(overlay_dir / f"{record.record_id}.png", overlay(heatmap, center_crop(record.image, crop)))

    result = evaluate_records(model, manifest.records, crop, cfg.eval.threshold, on_heatmap)
    out = Path(args.out or Path(cfg.out) / "eval")
    report = write_report(result, out, {"checkpoint": str(args.checkpoint), "dataset": str(dataset)})
    print(json.dumps({"confusion": report["confusion"], "percent": report["percent"],
                      "fp_rate": report["fp_rate"]}))
    return EXIT_OK


def _load_for_predict(args, cfg: RunConfig):
    path = Path(args.image)
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    try:
        image = read_image(path)
    except DatasetError as exc:
        raise InputError(str(exc)) from exc
    ch, cw = cfg.eval.crop
    h, w = image.shape[:2]
    if h < ch or w < cw:
        if not args.pad:
            raise InputError(f"image {h}x{w} smaller than {ch}x{cw}; use --pad")
        dh, dw = max(ch - h, 0), max(cw - w, 0)
        image = cv2.copyMakeBorder(image, dh // 2, dh - dh // 2, dw // 2, dw - dw // 2,
                                   cv2.BORDER_REFLECT_101)
    return image


def cmd_predict(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(_checkpoint(args.checkpoint))
    image = _load_for_predict(args, cfg)
    score, heatmap = predict_image(model, image, cfg.eval.crop)
    print(f"{classify(score, cfg.eval.threshold)}  score={score:.2f}")
    if args.overlay:
        _save_png(Path(args.overlay), overlay(heatmap, center_crop(image, cfg.eval.crop)))
    return EXIT_OK


def cmd_overlay(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(_checkpoint(args.checkpoint))
    image = _load_for_predict(args, cfg)
    score, heatmap = predict_image(model, image, cfg.eval.crop)
    out = Path(args.out or Path(args.image).with_suffix(".overlay.png"))
    _save_png(out, overlay(heatmap, center_crop(image, cfg.eval.crop)))
    print(f"score={score:.2f} -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toadhm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--out", help="output directory (overrides config)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed(s)")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic train pool and test split"), seed=True)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train with the plateau/abort/restart protocol"), seed=True)
    p.add_argument("--dataset", help="train-pool root (overrides config)")
    p.add_argument("--loss", choices=["mse", "weighted_bce"])
    p.add_argument("--wt", type=float, help="positive-class weight for weighted_bce")
    p.add_argument("--trace", action="store_true", help="write augment_trace.jsonl for epoch 0")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score a test split and write a report"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="test root (overrides config)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay-dir", help="write an overlay PNG per true positive")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("predict", cmd_predict, "classify one image"),
                             ("overlay", cmd_overlay, "write the heat-map overlay of one image")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("image")
        p.add_argument("--threshold", type=float)
        p.add_argument("--pad", action="store_true", help="reflect-pad images smaller than the crop")
        if name == "predict":
            p.add_argument("--overlay", help="also write the overlay PNG here")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CheckpointError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
