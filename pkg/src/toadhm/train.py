"""Training protocol: Adam, plateau halving, abort-and-restart, best checkpoint.

Within a run the learning rate is halved whenever the validation loss has
not beaten the best-so-far value for ``plateau_patience`` epochs, and the
run is aborted after ``abort_patience`` epochs without a new best.  Each
abort triggers a restart from the best checkpoint with the run's starting
rate halved, ``n_restarts`` times.
"""
from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment_pair
from .data import LABELS, NOT_TOAD, TOAD, DatasetManifest, FrameRecord
from .losses import LossConfig, torch_loss
from .model import HEAD_WEIGHT_DECAY, BackboneConfig, HeatmapNet, build_model, save_checkpoint

log = logging.getLogger(__name__)

CONTINUE, HALVE_LR, ABORT = "continue", "halve_lr", "abort"
HISTORY_NAME = "history.csv"
BEST_DIR = "best"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    batch_size: int = 4
    plateau_patience: int = 10
    abort_patience: int = 32
    n_restarts: int = 4
    weight_decay: float = HEAD_WEIGHT_DECAY
    split_ratio: float = 0.8
    split_seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    epochs_cap: int = 1000
    head_seed: int = 0
    torch_seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.plateau_patience < self.abort_patience:
            raise ValueError("need 0 < plateau_patience < abort_patience")
        if self.n_restarts < 0:
            raise ValueError("n_restarts must be >= 0")
        if not 0 < self.split_ratio <= 1:
            raise ValueError("split_ratio must lie in (0, 1]")
        if self.epochs_cap < 1:
            raise ValueError("epochs_cap must be >= 1")

    def restart_lrs(self) -> list[float]:
        return [self.initial_lr / 2 ** k for k in range(self.n_restarts + 1)]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "loss"}
        d["loss"] = self.loss.to_dict()
        return d


@dataclass
class SchedulerState:
    current_lr: float
    best_val_loss: float = math.inf
    epochs_since_best: int = 0
    epochs_since_lr_change: int = 0
    restart_index: int = 0
    improved: bool = False


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    restart: int
    action: str


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_checkpoint: Path | None = None
    best_val_loss: float = math.inf
    best_epoch: int | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr", "restart"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr), e.restart])

    def best_entry(self) -> EpochLog | None:
        if self.best_epoch is None:
            return None
        return next(e for e in self.epochs if e.epoch == self.best_epoch)


def split_dataset(records, ratio: float = 0.8, seed: int = 0):
    """Seeded, label-stratified split with ``floor(ratio * N)`` training records.

    Each label keeps its share of the training set (largest-remainder
    rounding), so the validation loss is not skewed by a lucky draw of
    positives.
    """
    records = list(records)
    n = len(records)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_train = math.floor(ratio * n)
    if n_train >= n:
        raise ValueError("split leaves no validation records; the scheduler needs them")
    if n_train == 0:
        raise ValueError("split leaves no training records")
    rng = np.random.default_rng(seed)
    by_label = {label: [i for i, r in enumerate(records) if r.label == label] for label in LABELS}
    quota = {label: n_train * len(idx) / n for label, idx in by_label.items()}
    take = {label: math.floor(q) for label, q in quota.items()}
    short = n_train - sum(take.values())
    for label in sorted(quota, key=lambda k: quota[k] - take[k], reverse=True)[:short]:
        take[label] += 1
    train_idx, val_idx = [], []
    for label in LABELS:
        idx = np.array(by_label[label], dtype=int)
        perm = idx[rng.permutation(len(idx))]
        train_idx += perm[:take[label]].tolist()
        val_idx += perm[take[label]:].tolist()
    return [records[i] for i in sorted(train_idx)], [records[i] for i in sorted(val_idx)]


def scheduler_step(state: SchedulerState, val_loss: float, config: TrainConfig):
    """Advance the plateau/abort state machine by one epoch.

    A loss counts as an improvement only when strictly below the best so
    far.  The plateau counter restarts after every halving; the abort
    counter only restarts on improvement.
    """
    if not math.isfinite(val_loss):
        log.error("validation loss is %r at lr %.3g; aborting run", val_loss, state.current_lr)
        return replace(state, improved=False), ABORT
    if val_loss < state.best_val_loss:
        return replace(state, best_val_loss=val_loss, epochs_since_best=0,
                       epochs_since_lr_change=0, improved=True), CONTINUE
    since_best = state.epochs_since_best + 1
    since_change = state.epochs_since_lr_change + 1
    if since_best >= config.abort_patience:
        return replace(state, epochs_since_best=since_best,
                       epochs_since_lr_change=since_change, improved=False), ABORT
    if since_change >= config.plateau_patience:
        return replace(state, current_lr=state.current_lr / 2, epochs_since_best=since_best,
                       epochs_since_lr_change=0, improved=False), HALVE_LR
    return replace(state, epochs_since_best=since_best, epochs_since_lr_change=since_change,
                   improved=False), CONTINUE


TRAIN_STREAM, VAL_STREAM, MEASURE_STREAM = 0, 1, 2


def sample_seed(split_seed: int, epoch: int, sample_id: str, stream: int = TRAIN_STREAM) -> int:
    key = zlib.crc32(sample_id.encode())
    return int(np.random.SeedSequence([split_seed, stream, epoch, key]).generate_state(1)[0])


def epoch_order(n: int, epoch: int, split_seed: int) -> np.ndarray:
    return np.random.default_rng([split_seed, epoch, 0x5EED]).permutation(n)


def _materialize(records) -> list[FrameRecord]:
    return [r if isinstance(r, FrameRecord) else r.load() for r in records]


def _batch(records, seeds, augment: AugmentConfig):
    samples = [augment_pair(r, s, augment) for r, s in zip(records, seeds)]
    x = torch.from_numpy(np.stack([s.X.transpose(2, 0, 1) for s in samples]))
    x = x.contiguous(memory_format=torch.channels_last)
    y = torch.from_numpy(np.stack([s.Y for s in samples]))[:, None]
    return x, y


def _optimizer(model: HeatmapNet, lr: float, weight_decay: float):
    head_w = [model.head.conv.weight]
    rest = [p for n, p in model.named_parameters() if n != "head.conv.weight"]
    return torch.optim.Adam([{"params": rest, "weight_decay": 0.0},
                             {"params": head_w, "weight_decay": weight_decay}], lr=lr)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def run_epoch(model, opt, records, epoch, config: TrainConfig, augment: AugmentConfig, loss_fn):
    model.train()
    order = epoch_order(len(records), epoch, config.split_seed)
    total, count = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        chunk = [records[i] for i in order[start:start + config.batch_size]]
        seeds = [sample_seed(config.split_seed, epoch, r.record_id) for r in chunk]
        x, y = _batch(chunk, seeds, augment)
        loss = loss_fn(y, model(x))
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item() * len(chunk)
        count += len(chunk)
    return total / count


@torch.no_grad()
def evaluate_loss(model, records, epoch, config: TrainConfig, augment: AugmentConfig, loss_fn,
                  stream: int = VAL_STREAM):
    """Mean loss over freshly augmented validation samples, eval mode."""
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(records), config.batch_size):
        chunk = records[start:start + config.batch_size]
        seeds = [sample_seed(config.split_seed, epoch, r.record_id, stream) for r in chunk]
        x, y = _batch(chunk, seeds, augment)
        total += float(loss_fn(y, model(x))) * len(chunk)
        count += len(chunk)
    return total / count


def split_losses(model, records, config: TrainConfig, augment: AugmentConfig | None = None,
                 passes: int = 10) -> tuple[float, float]:
    """Train and validation loss of fixed weights, measured the same way.

    Both sides use eval mode and held-out augmentation draws, averaged over
    ``passes`` epochs' worth of seeds, so the two numbers are comparable.
    """
    augment = augment or AugmentConfig()
    records = records.records if isinstance(records, DatasetManifest) else list(records)
    train_refs, val_refs = split_dataset(records, config.split_ratio, config.split_seed)
    train_set, val_set = _materialize(train_refs), _materialize(val_refs)
    loss_fn = torch_loss(config.loss)
    out = []
    for subset in (train_set, val_set):
        out.append(float(np.mean([evaluate_loss(model, subset, k, config, augment, loss_fn, MEASURE_STREAM)
                                  for k in range(passes)])))
    return out[0], out[1]


def run_training(manifest, config: TrainConfig, augment: AugmentConfig | None = None,
                 backbone: BackboneConfig | None = None, out_dir=None,
                 provenance: dict | None = None):
    """Full protocol; returns ``(best_model, history)``.

    ``manifest`` is a DatasetManifest or a plain sequence of records.  The
    best-validation weights are kept in memory and, with ``out_dir``,
    written to ``out_dir/best`` each time a new best is reached.
    """
    augment = augment or AugmentConfig()
    records = manifest.records if isinstance(manifest, DatasetManifest) else list(manifest)
    labels = {r.label for r in records}
    if labels != {TOAD, NOT_TOAD}:
        raise TrainingError(f"dataset must contain both classes, found {sorted(labels)}")
    train_refs, val_refs = split_dataset(records, config.split_ratio, config.split_seed)
    train_set, val_set = _materialize(train_refs), _materialize(val_refs)
    log.info("split: %d train / %d val", len(train_set), len(val_set))

    torch.manual_seed(config.torch_seed)
    # NHWC runs the CPU convolutions about 25% faster
    model = build_model(backbone, config.head_seed).to(memory_format=torch.channels_last)
    loss_fn = torch_loss(config.loss)
    history = TrainHistory()
    out_dir = Path(out_dir) if out_dir is not None else None
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    provenance = dict(provenance or {}, train_config=config.to_dict(), augment=augment.to_dict())

    epoch = 0
    best = math.inf
    for restart, lr in enumerate(config.restart_lrs()):
        if epoch >= config.epochs_cap:
            break
        if restart > 0:
            model.load_state_dict(best_state)
            log.info("restart %d from best checkpoint (val %.5f), lr %.3g", restart, best, lr)
        opt = _optimizer(model, lr, config.weight_decay)
        state = SchedulerState(current_lr=lr, best_val_loss=best, restart_index=restart)
        while epoch < config.epochs_cap:
            t0 = time.time()
            train_loss = run_epoch(model, opt, train_set, epoch, config, augment, loss_fn)
            val_loss = evaluate_loss(model, val_set, epoch, config, augment, loss_fn)
            lr_used = state.current_lr
            state, action = scheduler_step(state, val_loss, config)
            history.epochs.append(EpochLog(epoch, train_loss, val_loss, lr_used, restart, action))
            if state.improved:
                best = state.best_val_loss
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                history.best_val_loss, history.best_epoch = best, epoch
                if out_dir is not None:
                    history.best_checkpoint = save_checkpoint(
                        model, out_dir / BEST_DIR,
                        dict(provenance, epoch=epoch, val_loss=val_loss, train_loss=train_loss))
            log.info("epoch %d restart %d lr %.3g train %.5f val %.5f %s%s (%.1fs)",
                     epoch, restart, lr_used, train_loss, val_loss, action,
                     " *" if state.improved else "", time.time() - t0)
            if out_dir is not None:
                history.write_csv(out_dir / HISTORY_NAME)
            epoch += 1
            if action == HALVE_LR:
                _set_lr(opt, state.current_lr)
            elif action == ABORT:
                break

    model.load_state_dict(best_state)
    model = model.to(memory_format=torch.contiguous_format)
    model.eval()
    return model, history
