"""The eight acceptance criteria, each reported as one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from cliutil import pipeline, snapshot
from conftest import make_scene, supersampled_loss
from gradcases import composed_case, layer_cases
from radiomap.autodiff import check_gradients, precision
from radiomap.evaluate import rmse_db, tta_predict, weighted_score
from radiomap.features import FeatureConfig, antenna_gain_channel, fspl_channel, transmission_ray_channel, \
    traverse_cells
from radiomap.grid import D4Element, d4_compose, d4_elements, d4_transform
from radiomap.model import ModelConfig
from radiomap.oracle import (GeneratorParams, SplitCounts, TraceConfig, antenna_pool, build_dataset,
                             generate_scene, physics_baseline, trace_pathloss)
from radiomap.scene_io import load_scene
from radiomap.train import TrainConfig, load_samples, lr_at, train_two_stage


def test_1_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst_layer, worst_composed, where = 0.0, 0.0, ""
    with precision(np.float64):
        for seed in range(50):
            for name, fn, tensors in layer_cases(seed):
                err = check_gradients(fn, tensors)
                if err > worst_layer:
                    worst_layer, where = err, f"{name}@{seed}"
            fn, tensors = composed_case(seed)
            worst_composed = max(worst_composed, check_gradients(fn, tensors, samples=2,
                                                                 rng=np.random.default_rng(seed)))
    elapsed = time.perf_counter() - t0
    ok = worst_layer <= 1e-4 and worst_composed <= 1e-3 and elapsed < 120
    criterion(1, "gradient suite over 50 configurations", ok,
              f"layer max {worst_layer:.2e} at {where}, composed max {worst_composed:.2e}, {elapsed:.1f}s")
    assert ok


def test_2_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    params = GeneratorParams()
    worst = worst_default = 0.0
    for seed in range(20):
        scene = generate_scene(params, 1000 + seed, antennas=("isotropic",))
        want = fspl_channel(scene) + transmission_ray_channel(scene)
        # no ray is killed, so every pixel carries its direct path
        pl = trace_pathloss(scene, TraceConfig(max_bounces=0, min_power_db=1e4))
        worst = max(worst, float(np.max(np.abs(pl - want))))
        # default kill threshold: deep-shadow pixels report the ceiling instead
        default = TraceConfig(max_bounces=0)
        pl = trace_pathloss(scene, default)
        worst_default = max(worst_default, float(np.max(np.abs(pl - np.minimum(want, default.min_power_db)))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.1 and worst_default <= 0.1 and elapsed < 60
    criterion(2, "zero-bounce tracer equals FSPL plus wall loss", ok,
              f"max {worst:.2e} dB unclipped, {worst_default:.2e} dB at the default ceiling, {elapsed:.1f}s")
    assert ok


def test_3_traversal_exactness(criterion):
    rng = np.random.default_rng(3)
    n = 64
    worst_rel = 0.0
    for _ in range(10_000):
        p0, p1 = rng.uniform(0, n, 2), rng.uniform(0, n, 2)
        length = math.hypot(*(p1 - p0)) * 0.25
        if length == 0:
            continue
        chords = sum(x.chord_m for x in traverse_cells(p0, p1, 0.25, shape=(n, n)))
        worst_rel = max(worst_rel, abs(chords - length) / length)
    trans = np.round(rng.uniform(0, 40, (24, 24)) * 2) / 2
    scene = make_scene(24, 24, tx=(9.5, 11.5), cell=0.25, trans=trans)
    loss = transmission_ray_channel(scene)
    worst_db = 0.0
    for k in range(-9, 13):
        for r, c in ((9 + k, 11 + k), (9 + k, 11 - k)):
            if k and 0 <= r < 24 and 0 <= c < 24:
                want = supersampled_loss(trans, (9.5, 11.5), (r + 0.5, c + 0.5), 0.25)
                worst_db = max(worst_db, abs(loss[r, c] - want))
    ok = worst_rel <= 1e-9 and worst_db <= 0.01
    criterion(3, "chord sums and diagonal transmission loss", ok,
              f"chord rel err {worst_rel:.1e}, diagonal max {worst_db:.2e} dB")
    assert ok


def test_4_d4_and_tta_identities(criterion):
    rng = np.random.default_rng(4)
    grid = rng.normal(size=(9, 9))
    r1, flip = D4Element(1), D4Element(0, True)
    rot4 = grid
    for _ in range(4):
        rot4 = d4_transform(rot4, r1)
    exact = np.array_equal(rot4, grid) and np.array_equal(d4_transform(d4_transform(grid, flip), flip), grid)
    group = d4_compose(d4_compose(r1, r1), d4_compose(r1, r1)).is_identity and d4_compose(flip, flip).is_identity

    def stub(scene):
        # physically equivariant: free space, wall loss and antenna gain all move with the scene
        return physics_baseline(scene) - antenna_gain_channel(scene)

    worst = 0.0
    pool = antenna_pool()
    for seed in range(5):
        scene = generate_scene(GeneratorParams(grid_size=32), seed, antennas=(pool[seed].name,))
        worst = max(worst, float(np.max(np.abs(tta_predict(stub, scene, d4_elements()) - stub(scene)))))
    ok = exact and group and worst <= 1e-6
    criterion(4, "rot90^4 = flip^2 = id and TTA on an equivariant stub", ok, f"TTA max {worst:.1e} dB")
    assert ok


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    manifest = build_dataset(GeneratorParams(grid_size=64), SplitCounts(train=200, val=40, test_per_task=1), root)
    return manifest, time.perf_counter() - t0


@pytest.mark.slow
def test_5_two_stage_trend(criterion, desk_dataset):
    manifest, gen_s = desk_dataset
    t0 = time.perf_counter()
    fc = FeatureConfig()
    train = load_samples(manifest, "train", fc)
    val = load_samples(manifest, "val", fc)
    physics = np.stack([physics_baseline(load_scene(manifest.resolve(e.scene))) for e in manifest.entries("val")])
    physics_db = rmse_db(physics, val.target_db)
    cfg = ModelConfig(in_channels=train.x.shape[1])
    fine_cfg = ModelConfig(in_channels=train.x.shape[1] + 1)
    rows, wins, margins_ok = [], 0, True
    for seed in range(3):
        _, _, hist = train_two_stage(train, val, cfg, TrainConfig(epochs=30, seed=seed, model_seed=seed),
                                     TrainConfig(epochs=30, seed=seed + 1, model_seed=seed + 1),
                                     manifest.normalization, fc, fine_cfg)
        coarse_db, fine_db = min(hist["coarse"].val_rmse_db), min(hist["fine"].val_rmse_db)
        wins += fine_db <= coarse_db
        margins_ok &= physics_db - coarse_db >= 1.0 and physics_db - fine_db >= 1.0
        rows.append(f"seed {seed}: coarse {coarse_db:.3f} fine {fine_db:.3f}")
    elapsed = time.perf_counter() - t0 + gen_s
    ok = wins >= 2 and margins_ok
    criterion(5, "two-stage validation trend", ok,
              f"physics {physics_db:.3f} dB; " + "; ".join(rows) +
              f"; {elapsed / 60:.1f} min on this machine, time budget not asserted")
    assert ok


def test_6_evaluation_arithmetic(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        t = rng.uniform(0, 40, 3)
        worst = max(worst, abs(weighted_score(list(t)) - (0.3 * t[0] + 0.3 * t[1] + 0.4 * t[2])))
    worst_rmse = 0.0
    for _ in range(20):
        shape = tuple(rng.integers(1, 40, 2))
        a, b = rng.uniform(0, 200, shape), rng.uniform(0, 200, shape)
        total = 0.0
        for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
            total += (x - y) ** 2
        direct = math.sqrt(total / a.size)
        worst_rmse = max(worst_rmse, abs(rmse_db(a, b) - direct) / direct)
    ok = worst <= 1e-12 and worst_rmse <= 1e-9
    criterion(6, "weighted score and RMSE arithmetic", ok, f"score {worst:.1e}, rmse rel {worst_rmse:.1e}")
    assert ok


def test_7_cli_determinism(criterion, tmp_path):
    snaps = {(t, k): snapshot(pipeline(tmp_path / f"t{t}_{k}", threads=t)) for t in (1, 8) for k in (0, 1)}
    first = snaps[(1, 0)]
    same = {key: s == first for key, s in snaps.items()}
    kinds = {"datasets": ".rmt", "checkpoints": ".ckpt", "reports": "report"}
    covered = all(any(kind in name for name in first) for kind in kinds.values())
    ok = all(same.values()) and covered
    criterion(7, "CLI pipeline byte-identical at --threads 1 and 8", ok,
              f"{len(first)} files, " + ", ".join(f"threads {t} run {k}: {'same' if v else 'DIFF'}"
                                                 for (t, k), v in same.items()))
    assert ok


def test_8_lr_schedule(criterion):
    want = [1e-4] * 15 + [5e-5] * 7 + [2.5e-5] * 8
    got = [lr_at(e, 30, 1e-4) for e in range(30)]
    ok = got == want
    criterion(8, "step schedule for 30 epochs", ok, "epochs 0-14 1e-4, 15-21 5e-5, 22-29 2.5e-5")
    assert ok
