import math

import numpy as np
import pytest

from radiomap.features import (CHANNEL_STANDARDIZATION, COARSE_CHANNEL, PHYSICAL_CHANNELS, FeatureConfig,
                               antenna_gain_channel, assemble_features, distance_channel, feature_channel_count,
                               fspl_channel, fspl_from_distance, is_positional, spatial_frequency_embedding,
                               transmission_ray_channel, traverse_cells)
from radiomap.grid import GridError, d4_elements, d4_transform
from radiomap.oracle import GeneratorParams, antenna_pool, generate_scene
from radiomap.scene_io import AntennaPattern, transform_scene

from conftest import make_scene, supersampled_loss

C = 299792458.0


def test_distance_examples():
    s = make_scene(4, 24, tx=(1.5, 2.5), cell=0.5)
    d = distance_channel(s)
    assert d[1, 2] == 0.25
    assert d[1, 12] == 5.0
    r, c = 3, 17
    assert d[r, c] == pytest.approx(math.hypot(r + 0.5 - 1.5, c + 0.5 - 2.5) * 0.5, rel=1e-15)


def test_fspl_examples():
    assert fspl_from_distance(1.0, 1000.0) == pytest.approx(32.45, abs=0.005)
    assert fspl_from_distance(1.0, 1000.0) == pytest.approx(20 * math.log10(4 * math.pi * 1e9 / C), abs=1e-12)
    assert fspl_from_distance(2.0, 1000.0) - fspl_from_distance(1.0, 1000.0) == pytest.approx(6.0206, abs=1e-4)
    assert fspl_from_distance(1.0, 2000.0) - fspl_from_distance(1.0, 1000.0) == pytest.approx(6.0206, abs=1e-4)
    s = make_scene(8, 8, freq=868.0)
    assert np.allclose(fspl_channel(s), 20 * np.log10(4 * np.pi * distance_channel(s) * 868e6 / C), atol=1e-12)


def test_traverse_conventions():
    assert traverse_cells((1.2, 1.2), (1.2, 1.2), 0.5) == []
    xs = traverse_cells((2.5, 0.0), (2.5, 3.0), 0.5)
    assert [(x.row, x.col) for x in xs] == [(2, 0), (2, 1), (2, 2)]
    assert all(x.chord_m == pytest.approx(0.5, abs=1e-12) for x in xs)


def test_diagonal_2x2_corner_to_corner():
    xs = traverse_cells((0.0, 0.0), (2.0, 2.0), 0.25, shape=(2, 2))
    cells = [(x.row, x.col) for x in xs]
    # corner tie: the row axis steps first, leaving a zero-length chord in (1, 0)
    assert cells[0] == (0, 0) and cells[-1] == (1, 1)
    diag = [x for x in xs if (x.row, x.col) in ((0, 0), (1, 1))]
    trans = np.array([[10.0, 3.0], [7.0, 20.0]])
    for x in diag:
        assert x.chord_m == pytest.approx(math.sqrt(2) * 0.25, rel=1e-12)
        # the same chord from the supersampled oracle, in dB against a single attenuating cell
        only = np.zeros((2, 2))
        only[x.row, x.col] = 1.0
        assert x.chord_m == pytest.approx(supersampled_loss(only, (0, 0), (2, 2), 0.25), abs=1e-4)
    assert sum(trans[x.row, x.col] * x.chord_m for x in xs) == pytest.approx(
        supersampled_loss(trans, (0, 0), (2, 2), 0.25), abs=0.01)


def test_chord_sum_over_random_segments(rng):
    h = w = 16
    worst = 0.0
    for _ in range(2000):
        p0, p1 = rng.uniform(0, h, 2), rng.uniform(0, w, 2)
        xs = traverse_cells(p0, p1, 0.25, shape=(h, w))
        length = math.hypot(*(p1 - p0)) * 0.25
        worst = max(worst, abs(sum(x.chord_m for x in xs) - length) / length)
        cells = [(x.row, x.col) for x in xs]
        assert len(set(cells)) == len(cells)
        assert all(0 <= r < h and 0 <= c < w for r, c in cells)
        assert all(x.chord_m >= 0 for x in xs)
        assert cells[0] == (int(p0[0]), int(p0[1])) and cells[-1] == (int(p1[0]), int(p1[1]))
    assert worst <= 1e-9


def test_traverse_rejects_outside_points():
    with pytest.raises(GridError):
        traverse_cells((-0.1, 0), (1, 1), 1.0, shape=(4, 4))


def test_transmission_channel_examples():
    s = make_scene(8, 8, tx=(3.5, 0.5))
    assert not np.any(transmission_ray_channel(s))
    # one 50 dB/m wall, 0.2 m thick, crossed at right angles
    trans = np.zeros((8, 8))
    trans[:, 4] = 50.0
    s = make_scene(8, 8, tx=(3.5, 0.5), cell=0.2, trans=trans)
    t = transmission_ray_channel(s)
    assert t[3, 6] == pytest.approx(10.0, abs=1e-9)
    assert t[3, 2] == 0.0


def test_transmission_oblique_matches_supersampling(rng):
    trans = np.zeros((12, 12))
    trans[:, 5] = 50.0
    trans[7, :] = 20.0
    s = make_scene(12, 12, tx=(2.5, 1.5), cell=0.25, trans=trans)
    t = transmission_ray_channel(s)
    for r, c in [(11, 11), (9, 8), (6, 10), (11, 3)]:
        want = supersampled_loss(trans, (2.5, 1.5), (r + 0.5, c + 0.5), 0.25)
        assert t[r, c] == pytest.approx(want, abs=0.01)


def test_transmission_monotone_in_attenuation(rng):
    trans = rng.uniform(0, 30, (10, 10))
    s = make_scene(10, 10, tx=(4.5, 4.5), trans=trans)
    base = transmission_ray_channel(s)
    for _ in range(20):
        bumped = trans.copy()
        bumped[rng.integers(10), rng.integers(10)] += rng.uniform(0.5, 20)
        assert np.all(transmission_ray_channel(make_scene(10, 10, tx=(4.5, 4.5), trans=bumped)) >= base)


def _lookup(gains, a):
    a = np.mod(a, 360.0)
    return np.interp(a, np.arange(361), np.append(gains, gains[0]))


def test_antenna_gain_examples(rng):
    s = make_scene(9, 9, tx=(4.5, 4.5), orientation=37.0)
    assert not np.any(antenna_gain_channel(s))
    gains = np.array(antenna_pool()[1].gains_db)
    s0 = make_scene(9, 9, tx=(4.5, 4.5), antenna=AntennaPattern(gains), orientation=0.0)
    g0 = antenna_gain_channel(s0)
    assert g0[4, 8] == gains[0] and g0[4, 4] == gains[0]
    s90 = make_scene(9, 9, tx=(4.5, 4.5), antenna=AntennaPattern(gains), orientation=90.0)
    g90 = antenna_gain_channel(s90)
    assert g90[0, 4] == gains[0]
    rr, cc = np.meshgrid(np.arange(9), np.arange(9), indexing="ij")
    az = np.degrees(np.arctan2(-(rr + 0.5 - 4.5), cc + 0.5 - 4.5))
    mask = (rr != 4) | (cc != 4)
    assert np.allclose(g90[mask], _lookup(gains, az - 90.0)[mask], atol=1e-12)
    assert np.allclose(g0[mask], _lookup(gains, az)[mask], atol=1e-12)


def test_embedding_examples():
    cfg = FeatureConfig(n_pos_bands=3, n_freq_bands=2, f_lo_mhz=400, f_hi_mhz=6000)
    emb = spatial_frequency_embedding(make_scene(5, 7, tx=(1.5, 1.5), freq=400.0), cfg)
    assert len(emb) == 2 * 3 * 2 + 2 * 2
    assert np.all(emb.channel("pos_sin_u_0")[:, 0] == 0) and np.all(emb.channel("pos_cos_u_0")[:, 0] == 1)
    assert [float(emb.channel(f"freq_{f}_{k}")[0, 0]) for k in range(2) for f in ("sin", "cos")] == [0, 1, 0, 1]
    assert np.all(np.abs(emb.data) <= 1.0)
    u = np.arange(7) / 6
    assert np.allclose(emb.channel("pos_cos_u_2")[0], np.cos(4 * np.pi * u), atol=1e-15)


def test_frequency_outside_band_is_clamped(caplog):
    cfg = FeatureConfig(n_freq_bands=1)
    hi = spatial_frequency_embedding(make_scene(4, 4, tx=(1.5, 1.5), freq=9000.0), cfg)
    edge = spatial_frequency_embedding(make_scene(4, 4, tx=(1.5, 1.5), freq=6000.0), cfg)
    assert np.array_equal(hi.data, edge.data)
    assert any("outside" in r.message for r in caplog.records)


def test_assemble_order_and_counts():
    cfg = FeatureConfig()
    s = generate_scene(GeneratorParams(grid_size=32), 3)
    a = assemble_features(s, cfg)
    assert a.channel_names[:6] == list(PHYSICAL_CHANNELS)
    assert len(a) == feature_channel_count(cfg) == 6 + 16 + 8
    f = assemble_features(s, cfg, coarse_pred=np.full(s.shape, 0.3))
    assert len(f) == len(a) + 1 and f.channel_names[-1] == COARSE_CHANNEL
    assert feature_channel_count(cfg, fine=True) == len(f)
    assert assemble_features(s, cfg).data.tobytes() == a.data.tobytes()
    off, scale = CHANNEL_STANDARDIZATION["fspl"]
    assert np.allclose(a.channel("fspl"), (fspl_channel(s) - off) / scale)
    off, scale = CHANNEL_STANDARDIZATION["distance"]
    assert np.allclose(a.channel("distance"), (np.log10(distance_channel(s)) - off) / scale)
    with pytest.raises(GridError):
        assemble_features(s, cfg, coarse_pred=np.zeros((4, 4)))
    with pytest.raises(GridError):
        assemble_features(s, cfg, coarse_pred=np.full(s.shape, 1.5))


def test_include_flags_drop_channels():
    cfg = FeatureConfig(include={"antenna_gain": False, "freq_embedding": False})
    a = assemble_features(make_scene(8, 8), cfg)
    assert "antenna_gain" not in a.channel_names and not any(n.startswith("freq_") for n in a.channel_names)
    assert len(a) == feature_channel_count(cfg)


@pytest.mark.parametrize("e", d4_elements(), ids=str)
def test_physical_channels_are_d4_equivariant(e):
    params = GeneratorParams(grid_size=24)
    for seed in range(3):
        s = generate_scene(params, seed)
        a = assemble_features(s)
        b = assemble_features(transform_scene(s, e))
        for i, name in enumerate(a.channel_names):
            if is_positional(name):
                continue
            assert np.allclose(b.data[i], d4_transform(a.data[i], e), atol=1e-9, rtol=0), name
