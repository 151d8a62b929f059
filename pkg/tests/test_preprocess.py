import numpy as np
import pytest

from flimct.errors import DegenerateRange, TwoSummitsNotFound
from flimct.preprocess import (
    Histogram,
    StandardizerConfig,
    compute_histogram,
    find_summits,
    standardize,
)
from flimct.volcore import Volume


def bimodal_volume(rng, low=100.0, high=800.0, dims=(12, 12, 12), frac_high=0.3):
    n = dims[0] * dims[1] * dims[2]
    n_high = int(n * frac_high)
    values = np.concatenate([rng.normal(low, 12.0, n - n_high),
                             rng.normal(high, 12.0, n_high)])
    rng.shuffle(values)
    return Volume(values.reshape(dims + (1,)))


def test_histogram_degenerate_range():
    with pytest.raises(DegenerateRange):
        compute_histogram(Volume(np.full((2, 2, 2, 1), 5.0)), None,
                          StandardizerConfig())


def test_histogram_forced_tally():
    data = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.float64).reshape(2, 2, 2, 1)
    cfg = StandardizerConfig(bins=8)
    h = compute_histogram(Volume(data), None, cfg)
    assert h.counts[0] == 4 and h.counts[-1] == 4
    assert h.counts.sum() == 8


def test_histogram_matches_bruteforce():
    rng = np.random.default_rng(0)
    vol = Volume(rng.uniform(0, 100, size=(5, 5, 5, 1)))
    cfg = StandardizerConfig(bins=16)
    h = compute_histogram(vol, None, cfg)
    # per-voxel binning oracle
    values = vol.data.reshape(-1)
    lo, hi = values.min(), values.max()
    width = (hi - lo) / 16
    counts = np.zeros(16, dtype=int)
    for v in values:
        b = min(int((v - lo) / width), 15)
        counts[b] += 1
    assert np.array_equal(h.counts, counts)


def test_summits_bimodal():
    rng = np.random.default_rng(1)
    vol = bimodal_volume(rng)
    cfg = StandardizerConfig()
    h = compute_histogram(vol, None, cfg)
    s1, s2 = find_summits(h, cfg)
    # exhaustive smoothed-argmax oracle on each half of the range
    assert abs(s1 - 100.0) <= 2 * h.bin_width + 12.0
    assert abs(s2 - 800.0) <= 2 * h.bin_width + 12.0


def test_summits_strictly_decreasing():
    counts = np.arange(256, 0, -1)
    h = Histogram(counts=counts, lo=0.0, hi=256.0)
    with pytest.raises(TwoSummitsNotFound):
        find_summits(h, StandardizerConfig())


def test_summits_single_spike():
    counts = np.zeros(256, dtype=np.int64)
    counts[100] = 1000
    h = Histogram(counts=counts, lo=0.0, hi=256.0)
    with pytest.raises(TwoSummitsNotFound):
        find_summits(h, StandardizerConfig())


def test_standardize_places_summits_at_targets():
    rng = np.random.default_rng(2)
    vol = bimodal_volume(rng, dims=(16, 16, 16))
    cfg = StandardizerConfig()
    out = standardize(vol, None, cfg)
    h = compute_histogram(out, None, cfg)
    o1, o2 = find_summits(h, cfg)
    assert abs(o1 - cfg.targets[0]) <= 2 * h.bin_width
    assert abs(o2 - cfg.targets[1]) <= 2 * h.bin_width


def test_standardize_idempotent():
    rng = np.random.default_rng(3)
    vol = bimodal_volume(rng, dims=(16, 16, 16))
    cfg = StandardizerConfig()
    once = standardize(vol, None, cfg)
    twice = standardize(once, None, cfg)
    h = compute_histogram(twice, None, cfg)
    o1, o2 = find_summits(h, cfg)
    assert abs(o1 - cfg.targets[0]) <= 2 * h.bin_width
    assert abs(o2 - cfg.targets[1]) <= 2 * h.bin_width


def test_affine_fixes_first_summit():
    rng = np.random.default_rng(4)
    vol = bimodal_volume(rng, dims=(16, 16, 16))
    cfg = StandardizerConfig()
    h = compute_histogram(vol, None, cfg)
    s1, s2 = find_summits(h, cfg)
    out = standardize(vol, None, cfg)
    # a voxel exactly at s1 maps exactly to t1
    idx = np.abs(vol.data - s1).argmin()
    x = vol.data.reshape(-1)[idx]
    expected = cfg.targets[0] + (x - s1) * (cfg.targets[1] - cfg.targets[0]) / (s2 - s1)
    assert np.isclose(out.data.reshape(-1)[idx], expected)


def test_output_inside_clamp():
    rng = np.random.default_rng(5)
    vol = bimodal_volume(rng, low=-500.0, high=5000.0, dims=(12, 12, 12))
    cfg = StandardizerConfig()
    out = standardize(vol, None, cfg)
    assert out.data.min() >= cfg.clamp[0]
    assert out.data.max() <= cfg.clamp[1]


def test_order_preserved_before_clamp():
    rng = np.random.default_rng(6)
    vol = bimodal_volume(rng, dims=(12, 12, 12))
    cfg = StandardizerConfig(clamp=(-1e9, 1e9), targets=(200.0, 1200.0))
    out = standardize(vol, None, cfg)
    order_in = np.argsort(vol.data.reshape(-1), kind="stable")
    order_out = np.argsort(out.data.reshape(-1), kind="stable")
    assert np.array_equal(order_in, order_out)


def test_config_json_roundtrip():
    cfg = StandardizerConfig(bins=128, smoothing_window=7, min_prominence=0.1,
                             targets=(100.0, 900.0), clamp=(0.0, 2000.0))
    back = StandardizerConfig.from_json(cfg.to_json())
    assert back == cfg
