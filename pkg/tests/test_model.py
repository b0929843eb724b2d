import time

import numpy as np
import pytest

from radiomap import autodiff as ad
from radiomap.autodiff import Tensor, check_gradients, precision
from radiomap.features import FeatureConfig, feature_channel_count
from radiomap.grid import NormalizationSpec, denormalize
from radiomap.model import (ModelConfig, StageModel, build_model, fine_combine, forward, parameter_count,
                            predict_normalized, predict_pathloss)
from radiomap.oracle import GeneratorParams, generate_scene

from gradcases import composed_case


def _bytes(params):
    return b"".join(k.encode() + p.data.tobytes() for k, p in params.items())


def test_build_deterministic():
    cfg = ModelConfig(in_channels=5, base_width=4, n_stages=3)
    assert _bytes(build_model(cfg, 3)) == _bytes(build_model(cfg, 3))
    assert _bytes(build_model(cfg, 3)) != _bytes(build_model(cfg, 4))


def test_parameter_count_regression():
    # stem 672, enc0 600, enc1 3552, attention block 2224, dec0 748, head 9
    params = build_model(ModelConfig(in_channels=9, base_width=8, n_stages=2))
    assert parameter_count(params) == 7805
    assert len(set(params)) == len(params)


def test_config_errors():
    with pytest.raises(ValueError):
        ModelConfig(in_channels=3, n_stages=1)
    with pytest.raises(ValueError):
        ModelConfig(in_channels=3, decoder_kernels=(1, 2))
    cfg = ModelConfig(in_channels=3, base_width=4, n_stages=3)
    params = build_model(cfg)
    with pytest.raises(ad.ShapeError):
        forward(params, Tensor(np.zeros((1, 4, 8, 8))), cfg)
    with pytest.raises(ValueError, match="divisible"):
        forward(params, Tensor(np.zeros((1, 3, 6, 8))), cfg)


def test_output_range_and_shape(rng):
    cfg = ModelConfig(in_channels=3, base_width=4, n_stages=3)
    params = build_model(cfg, 1)
    for scale in (0.1, 10.0, 1000.0):
        out = forward(params, Tensor(rng.normal(scale=scale, size=(2, 3, 16, 8))), cfg).data
        assert out.shape == (2, 1, 16, 8)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_zero_head_gives_half(rng):
    cfg = ModelConfig(in_channels=3, base_width=4, n_stages=2)
    out = forward(build_model(cfg, 0, zero_head=True), Tensor(rng.normal(size=(1, 3, 8, 8))), cfg).data
    assert np.all(out == 0.5)


def test_fine_zero_head_reproduces_coarse():
    fc = FeatureConfig(n_pos_bands=1, n_freq_bands=1)
    scene = generate_scene(GeneratorParams(grid_size=16), 2)
    c_cfg = ModelConfig(in_channels=feature_channel_count(fc), base_width=4, n_stages=2)
    f_cfg = ModelConfig(in_channels=feature_channel_count(fc, fine=True), base_width=4, n_stages=2)
    coarse = StageModel(build_model(c_cfg, 0), c_cfg, feature_cfg=fc)
    fine = StageModel(build_model(f_cfg, 1, zero_head=True), f_cfg, fine=True, feature_cfg=fc)
    norm = NormalizationSpec()
    maps = predict_normalized(scene, coarse, fine)
    assert np.array_equal(maps["fine"], maps["coarse"])
    a = predict_pathloss(scene, coarse, norm)
    b = predict_pathloss(scene, coarse, norm, fine)
    assert np.array_equal(a, b)
    assert a.min() >= norm.lo_db and a.max() <= norm.hi_db
    assert predict_pathloss(scene, coarse, norm).tobytes() == a.tobytes()


def test_fine_combine_bounds():
    c = Tensor(np.array([0.0, 0.3, 0.9, 1.0]))
    f = Tensor(np.array([0.0, 0.75, 1.0, 0.5]))
    assert fine_combine(c, f).data.tolist() == pytest.approx([0.0, 0.8, 1.0, 1.0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composed_model_gradients(seed):
    with precision(np.float64):
        fn, tensors = composed_case(seed)
        assert check_gradients(fn, tensors, samples=3, rng=np.random.default_rng(seed)) <= 1e-3


def _best_forward(params, cfg, size, repeat=5):
    x = Tensor(np.random.default_rng(0).normal(size=(1, cfg.in_channels, size, size)))
    forward(params, x, cfg)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        forward(params, x, cfg)
        best = min(best, time.perf_counter() - t0)
    return best


def test_forward_cost_scales_with_pixels():
    cfg = ModelConfig(in_channels=30)
    params = build_model(cfg)
    ratio = _best_forward(params, cfg, 128) / _best_forward(params, cfg, 64)
    assert 3.2 <= ratio <= 4.8, ratio
