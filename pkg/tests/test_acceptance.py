"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3
tests/test_acceptance.py``).  Criterion 8 trains a model end to end and
takes roughly a quarter of an hour on one CPU core.
"""
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from toadhm.augment import AugmentConfig, augment_pair, hflip, normalize
from toadhm.cli import RunConfig, main
from toadhm.data import extract_test_indices, extract_training_indices, synth_scene
from toadhm.evaluation import ConfusionMatrix, metrics
from toadhm.losses import mse, mse_grad, weighted_bce, weighted_bce_grad
from toadhm.model import build_model, gmp_forward, heatmap_forward
from toadhm.targets import BoundingBox, evaluate_gaussian, gaussian_params
from toadhm.train import ABORT, CONTINUE, HALVE_LR, SchedulerState, TrainConfig, scheduler_step

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.yaml"


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  criterion {n}: {title}" + (f"  [{detail}]" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def test_criterion_1_metric_reproduction(verdict):
    m = metrics(ConfusionMatrix(TP=1728, FP=0, FN=135, TN=2892))
    got = m.percentages()
    want = {"recall": 92.7, "precision": 100.0, "accuracy": 97.1, "f_measure": 96.2}
    verdict(1, "counts 1728/0/135/2892 give 92.7/100.0/97.1/96.2 %", got == want, str(got))


def test_criterion_2_gaussian_targets(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        r0, c0 = rng.integers(0, 600, 2)
        h, w = rng.integers(2, 300, 2)
        box = BoundingBox(int(r0), int(r0 + h), int(c0), int(c0 + w))
        g = gaussian_params(box)
        rm, cm = box.center
        f = lambda r, c: evaluate_gaussian(g, r, c)
        checks = [
            f(rm, cm) - 1.0,
            f(box.r_min, cm) - 0.5, f(box.r_max, cm) - 0.5,
            f(rm, box.c_min) - 0.5, f(rm, box.c_max) - 0.5,
            f(box.r_min, box.c_min) - 0.25, f(box.r_max, box.c_max) - 0.25,
        ]
        dr, dc = rng.uniform(-400, 400, 2)
        checks.append(f(rm + dr, cm + dc) - f(rm - dr, cm - dc))
        checks.append(f(rm + dr, cm + dc) - f(rm + dr, cm) * f(rm, cm + dc))
        worst = max(worst, max(abs(x) for x in checks))
    elapsed = time.perf_counter() - t0
    verdict(2, "Gaussian center/boundary/corner/symmetry/separability",
            worst <= 1e-9 and elapsed < 1.0, f"max err {worst:.1e}, {elapsed:.2f}s")


def test_criterion_3_wrapper_equivalence(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(100):
        if i % 10 == 0:
            torch.manual_seed(i)
            model = build_model(head_seed=i).eval()
            for p in model.parameters():
                p.data.add_(0.05 * torch.randn_like(p))
        h, w = 32 * rng.integers(2, 6, 2)
        x = rng.normal(size=(h, w, 3)).astype(np.float32)
        hm = heatmap_forward(model, x)
        brute = max(float(v) for v in hm.ravel())
        mismatches += gmp_forward(model, x) != brute
    shapes = (heatmap_forward(model, np.zeros((704, 704, 3), np.float32)).shape,
              heatmap_forward(model, np.zeros((704, 1280, 3), np.float32)).shape)
    ok = mismatches == 0 and shapes == ((22, 22), (22, 40))
    verdict(3, "Gmp equals brute-force heat-map max; output shapes", ok,
            f"{mismatches} mismatches, shapes {shapes}")


def _central(f, p, h=1e-5):
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        hi, lo = p.copy(), p.copy()
        hi[idx] += h
        lo[idx] -= h
        g[idx] = (f(hi) - f(lo)) / (2 * h)
    return g


def test_criterion_4_gradient_checks(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y, p = rng.random((5, 6)), rng.uniform(0.05, 0.95, (5, 6))
        pairs = [(weighted_bce_grad(y, p, W_t=wt), _central(lambda q: weighted_bce(y, q, W_t=wt), p))
                 for wt in (1.0, 100.0)]
        pairs.append((mse_grad(y, p), _central(lambda q: mse(y, q), p)))
        for ana, num in pairs:
            worst = max(worst, float(np.max(np.abs(ana - num) / np.abs(num))))
    verdict(4, "analytic loss gradients match central differences", worst <= 1e-5,
            f"max rel err {worst:.1e}")


def test_criterion_5_normalization(verdict):
    rng = np.random.default_rng(5)
    worst_mean, offset_exact = 0.0, True
    for _ in range(100):
        img = rng.integers(0, 256, (48, 64, 3)).astype(np.float64)
        s = rng.uniform(0.75, 1.25)
        worst_mean = max(worst_mean, abs(float(normalize(img, s).mean())))
        shift = float(rng.integers(-100, 100))
        offset_exact &= bool(np.allclose(normalize(img + shift, s), normalize(img, s), rtol=0, atol=1e-12))
    two = normalize(np.array([0.0, 251.0]), 1.0)
    ok = worst_mean <= 1e-6 and offset_exact and np.array_equal(two, [-1.0, 1.0])
    verdict(5, "zero mean, offset invariance, {0,251} -> {-1,+1}", ok,
            f"max |mean| {worst_mean:.1e}, two-pixel {two.tolist()}")


def _replay(losses):
    cfg = TrainConfig()
    state, actions = SchedulerState(current_lr=cfg.initial_lr), []
    for v in losses:
        state, a = scheduler_step(state, v, cfg)
        actions.append(a)
    return state, actions


def test_criterion_6_scheduler_replay(verdict):
    s1, a1 = _replay([1.0 - 0.01 * i for i in range(40)])
    s2, a2 = _replay([1.0] * 11)
    _, a3 = _replay([1.0] * 33)
    lrs = TrainConfig().restart_lrs()
    ok = (set(a1) == {CONTINUE} and a2[-1] == HALVE_LR and s2.current_lr == 5e-5
          and a3[-1] == ABORT and ABORT not in a3[:-1]
          and lrs == [1e-4, 5e-5, 2.5e-5, 1.25e-5, 6.25e-6])
    verdict(6, "continue / halve to 5e-5 / abort; restart lrs", ok, f"restart lrs {lrs}")


def test_criterion_7_augmentation(verdict):
    cfg = RunConfig.load(DESK)
    shape = cfg.synth.shape
    base = cfg.augment.to_dict()
    aug = cfg.augment
    no_flip, flip = AugmentConfig(**dict(base, flip_prob=0.0)), AugmentConfig(**dict(base, flip_prob=1.0))
    records = [synth_scene(i, "toad" if i % 2 else "not_toad", shape) for i in range(10)]
    t0 = time.perf_counter()
    bad = 0
    for i in range(500):
        rec = records[i % 10]
        a, b = augment_pair(rec, i, aug), augment_pair(rec, i, aug)
        bad += not (np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y))
        if i % 5 == 0:
            n, f = augment_pair(rec, i, no_flip), augment_pair(rec, i, flip)
            bad += not np.array_equal(f.Y, n.Y[:, ::-1])
        bad += not np.array_equal(hflip(hflip(rec.image)), rec.image)
    elapsed = time.perf_counter() - t0
    verdict(7, "augmentation determinism, forced flip, double flip", bad == 0 and elapsed < 30,
            f"{bad} failures, {elapsed:.1f}s for 500 samples")


@pytest.mark.slow
def test_criterion_8_end_to_end(verdict, tmp_path):
    cfg = RunConfig.load(DESK)
    data, run = tmp_path / "data", tmp_path / "run"
    t0 = time.perf_counter()
    assert main(["synth", "--config", str(DESK), "--out", str(data)]) == 0
    assert main(["train", "--config", str(DESK), "--dataset", str(data / "train"), "--out", str(run)]) == 0
    assert main(["eval", "--config", str(DESK), "--dataset", str(data / "test"),
                 "--checkpoint", str(run / "best"), "--out", str(run / "eval")]) == 0
    minutes = (time.perf_counter() - t0) / 60
    report = json.loads((run / "eval" / "metrics.json").read_text())
    summary = json.loads((run / "summary.json").read_text())
    acc, fpr, gap = report["metrics"]["accuracy"], report["fp_rate"], summary["relative_gap"]
    counts = (sum(cfg.synth.train_counts.values()), sum(cfg.synth.test_counts.values()))
    ok = counts == (735, 400) and acc >= 0.95 and fpr <= 0.02 and gap <= 0.10 and minutes <= 20
    verdict(8, "desk-scale synth/train/eval run", ok,
            f"accuracy {acc:.4f}, FP rate {fpr:.4f}, val/train gap {100 * gap:.1f}% "
            f"(train {summary['train_loss']:.5f}, val {summary['val_loss']:.5f}), "
            f"{minutes:.1f} min, confusion {report['confusion']}")


def test_criterion_9_frame_sampling(verdict):
    ok = extract_training_indices(100) == [1, 42, 83] and extract_test_indices(40)[:3] == [10, 19, 28]
    for n in range(10_001):
        train, test = extract_training_indices(n), extract_test_indices(n)
        expect_test = [k for k in range(10, n + 1, 9) if (k - 1) % 41]
        if train != list(range(1, n + 1, 41)) or test != expect_test or set(train) & set(test):
            ok = False
            break
    verdict(9, "frame-sampling rules and disjointness for n <= 10000", ok)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
