import csv

import numpy as np
import pytest
import torch

from toadhm.augment import AugmentConfig
from toadhm.data import synth_records
from toadhm.model import BackboneConfig, heatmap_forward, load_checkpoint
from toadhm.train import (
    ABORT, CONTINUE, HALVE_LR, SchedulerState, TrainConfig, TrainingError, epoch_order,
    run_training, sample_seed, scheduler_step, split_dataset,
)


class Rec:
    def __init__(self, i, label):
        self.record_id, self.label = f"r{i}", label


def pool(n_toad, n_not):
    return [Rec(i, "toad") for i in range(n_toad)] + [Rec(n_toad + i, "not_toad") for i in range(n_not)]


def test_split_735_pool_sizes():
    train, val = split_dataset(pool(66, 669), 0.8, seed=1)
    assert (len(train), len(val)) == (588, 147)
    assert {r.record_id for r in train}.isdisjoint(r.record_id for r in val)
    assert sum(r.label == "toad" for r in train) == 53


def test_split_deterministic():
    a = split_dataset(pool(10, 40), 0.8, seed=3)
    b = split_dataset(pool(10, 40), 0.8, seed=3)
    c = split_dataset(pool(10, 40), 0.8, seed=4)
    ids = lambda s: [r.record_id for r in s[0]]
    assert ids(a) == ids(b) and ids(a) != ids(c)


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset([], 0.8)
    with pytest.raises(ValueError):
        split_dataset(pool(3, 3), 1.0)


def replay(losses, cfg=None):
    cfg = cfg or TrainConfig()
    state = SchedulerState(current_lr=cfg.initial_lr)
    trace = []
    for v in losses:
        state, action = scheduler_step(state, v, cfg)
        trace.append((state.current_lr, action))
    return state, trace


def test_scheduler_decreasing():
    state, trace = replay([1.0 - 0.01 * i for i in range(20)])
    assert all(a == CONTINUE for _, a in trace) and state.current_lr == 1e-4


def test_scheduler_plateau_halves():
    state, trace = replay([1.0] * 11)
    assert [a for _, a in trace] == [CONTINUE] * 10 + [HALVE_LR]
    assert state.current_lr == 5e-5


def test_scheduler_aborts_after_32():
    _, trace = replay([1.0] * 33)
    actions = [a for _, a in trace]
    assert actions[-1] == ABORT and ABORT not in actions[:-1]
    assert actions.count(HALVE_LR) == 3


def test_scheduler_nan_aborts():
    state = SchedulerState(current_lr=1e-4, best_val_loss=0.5)
    _, action = scheduler_step(state, float("nan"), TrainConfig())
    assert action == ABORT


def test_scheduler_replay_deterministic():
    rng = np.random.default_rng(0)
    losses = list(np.minimum.accumulate(rng.random(80)) + rng.random(80) * 0.1)
    assert replay(losses)[1] == replay(losses)[1]


def test_restart_lrs():
    assert TrainConfig().restart_lrs() == [1e-4, 5e-5, 2.5e-5, 1.25e-5, 6.25e-6]
    assert TrainConfig(n_restarts=0).restart_lrs() == [1e-4]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience=32, abort_patience=10)
    with pytest.raises(ValueError):
        TrainConfig(n_restarts=-1)
    assert TrainConfig(loss={"kind": "weighted_bce", "W_t": 100}).loss.kind == "weighted_bce"


def test_seeds_deterministic():
    assert sample_seed(1, 2, "a") == sample_seed(1, 2, "a") != sample_seed(1, 3, "a")
    assert np.array_equal(epoch_order(10, 4, 7), epoch_order(10, 4, 7))
    assert not np.array_equal(epoch_order(50, 4, 7), epoch_order(50, 5, 7))


TINY_AUG = AugmentConfig(crop1=(64, 64), crop2=(64, 64), perspective_magnitude=0.02)
TINY_NET = BackboneConfig((8, 8, 16, 16, 16))


@pytest.fixture(scope="module")
def tiny_pool():
    return list(synth_records({"toad": 6, "not_toad": 14}, 0, (64, 96), "train"))


def test_single_class_rejected(tiny_pool):
    with pytest.raises(TrainingError):
        run_training([r for r in tiny_pool if r.label == "toad"], TrainConfig())


def test_run_training_protocol(tmp_path, tiny_pool):
    cfg = TrainConfig(initial_lr=1e-3, plateau_patience=1, abort_patience=2, n_restarts=2,
                      epochs_cap=12)
    model, hist = run_training(tiny_pool, cfg, TINY_AUG, TINY_NET, out_dir=tmp_path)
    restarts = [e.restart for e in hist.epochs]
    assert restarts == sorted(restarts)
    starts = {}
    for e in hist.epochs:
        starts.setdefault(e.restart, e.lr)
    assert all(starts[k] == 1e-3 / 2 ** k for k in starts)
    assert hist.best_val_loss == min(e.val_loss for e in hist.epochs)
    # running best is monotone
    best = np.minimum.accumulate([e.val_loss for e in hist.epochs])
    assert np.all(np.diff(best) <= 0)
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(hist.epochs) and set(rows[0]) == {"epoch", "train_loss", "val_loss", "lr", "restart"}
    # on-disk checkpoint is the best one, and so are the returned weights
    saved = load_checkpoint(tmp_path / "best")
    for k, v in model.state_dict().items():
        assert torch.equal(v, saved.state_dict()[k])
    x = np.random.default_rng(0).normal(size=(64, 64, 3)).astype(np.float32)
    assert np.array_equal(heatmap_forward(saved, x), heatmap_forward(model, x))
    assert hist.best_entry().val_loss == hist.best_val_loss


def test_no_restarts_single_run(tiny_pool):
    cfg = TrainConfig(initial_lr=1e-3, plateau_patience=1, abort_patience=2, n_restarts=0,
                      epochs_cap=8)
    _, hist = run_training(tiny_pool, cfg, TINY_AUG, TINY_NET)
    assert {e.restart for e in hist.epochs} == {0}
    assert hist.epochs[-1].action == "abort" or len(hist.epochs) == 8


def test_training_reproducible(tiny_pool):
    cfg = TrainConfig(initial_lr=1e-3, epochs_cap=2)
    _, h1 = run_training(tiny_pool, cfg, TINY_AUG, TINY_NET)
    _, h2 = run_training(tiny_pool, cfg, TINY_AUG, TINY_NET)
    assert [(e.train_loss, e.val_loss) for e in h1.epochs] == [(e.train_loss, e.val_loss) for e in h2.epochs]
