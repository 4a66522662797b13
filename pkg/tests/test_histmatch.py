import numpy as np
import pytest

from makeupcloak import data, histmatch

HALF_BIN = 1.0 / 256.0  # half of one bin width with the default 256 bins


def sort_match_oracle(src_vals: np.ndarray, ref_vals: np.ndarray) -> np.ndarray:
    """Independent rank-matching oracle: sort both regions, map by quantile."""
    n, m = len(src_vals), len(ref_vals)
    order = np.argsort(src_vals, kind="stable")
    ranks = np.empty(n, dtype=int)
    ranks[order] = np.arange(n)
    ref_sorted = np.sort(ref_vals)
    idx = np.minimum((np.floor((ranks + 0.5) / n * m)).astype(int), m - 1)
    return ref_sorted[idx]


def full_mask(h, w):
    return np.ones((h, w), dtype=bool)


def test_histogram_constant_image_single_bin():
    img = np.zeros((3, 8, 8), dtype=np.float32)
    h = histmatch.channel_histogram(img, full_mask(8, 8), channel=0)
    assert (h.bin_counts > 0).sum() == 1
    assert h.bin_counts.max() == 64


def test_histogram_single_pixel_mask():
    img = np.zeros((3, 4, 4), dtype=np.float32)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1, 2] = True
    h = histmatch.channel_histogram(img, mask, channel=1)
    assert h.mask_pixel_count == 1


def test_histogram_hand_binned_four_bins():
    # values {-1, -1, 0, 1} with 4 bins (edges -1, -0.5, 0, 0.5, 1) -> (2, 0, 1, 1)
    img = np.array([[[-1.0, -1.0], [0.0, 1.0]]] * 3, dtype=np.float32)
    h = histmatch.channel_histogram(img, full_mask(2, 2), channel=0, bins=4)
    assert h.bin_counts.tolist() == [2, 0, 1, 1]


def test_histogram_empty_mask_error():
    img = np.zeros((3, 4, 4), dtype=np.float32)
    with pytest.raises(ValueError, match="empty mask"):
        histmatch.channel_histogram(img, np.zeros((4, 4), dtype=bool), 0)


def test_match_constant_reference():
    rng = np.random.default_rng(0)
    src = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    ref = np.full((3, 8, 8), 0.3, dtype=np.float32)
    matched = histmatch.match_region(src, full_mask(8, 8), ref, full_mask(8, 8))
    assert np.abs(matched - 0.3).max() <= HALF_BIN


def test_match_identity_within_quantization():
    rng = np.random.default_rng(1)
    img = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    matched = histmatch.match_region(img, full_mask(8, 8), img, full_mask(8, 8))
    src_vals = img[:, full_mask(8, 8)]
    assert np.abs(matched - src_vals).max() <= 2.0 / 256.0


def test_match_two_pixel_example():
    # source {0.0, 0.5}, reference {-0.5, 1.0} -> matched ~ {-0.5, 1.0}, order kept
    src = np.zeros((3, 1, 2), dtype=np.float32)
    src[:, 0, 1] = 0.5
    ref = np.full((3, 1, 2), -0.5, dtype=np.float32)
    ref[:, 0, 1] = 1.0
    matched = histmatch.match_region(src, full_mask(1, 2), ref, full_mask(1, 2))
    assert np.abs(matched[:, 0] - (-0.5)).max() <= HALF_BIN
    assert np.abs(matched[:, 1] - 1.0).max() <= HALF_BIN


def test_match_agrees_with_sort_oracle_random():
    rng = np.random.default_rng(2)
    for _ in range(20):
        src = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
        ref = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
        matched = histmatch.match_region(src, full_mask(8, 8), ref, full_mask(8, 8))
        for c in range(3):
            want = sort_match_oracle(src[c].ravel(), ref[c].ravel())
            assert np.abs(matched[c] - want).max() <= HALF_BIN + 1e-12


def test_match_unequal_region_sizes_against_oracle():
    rng = np.random.default_rng(3)
    src = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    ref = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    src_mask = rng.random((8, 8)) < 0.7
    ref_mask = rng.random((8, 8)) < 0.4
    matched = histmatch.match_region(src, src_mask, ref, ref_mask)
    for c in range(3):
        want = sort_match_oracle(src[c][src_mask], ref[c][ref_mask])
        assert np.abs(matched[c] - want).max() <= HALF_BIN + 1e-12


def test_match_monotone():
    rng = np.random.default_rng(4)
    src = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    ref = rng.uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    matched = histmatch.match_region(src, full_mask(8, 8), ref, full_mask(8, 8))
    for c in range(3):
        order = np.argsort(src[c].ravel(), kind="stable")
        assert np.all(np.diff(matched[c][order]) >= 0.0)


def test_match_mean_transfer():
    rng = np.random.default_rng(5)
    src = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
    ref = rng.uniform(-0.5, 0.9, size=(3, 16, 16)).astype(np.float32)
    matched = histmatch.match_region(src, full_mask(16, 16), ref, full_mask(16, 16))
    for c in range(3):
        assert abs(matched[c].mean() - ref[c].mean()) <= 2.0 / 256.0


def _faces(res=32):
    a, ma = data.synth_face(0, "source", np.random.default_rng(10), res)
    b, mb = data.synth_face(5, "reference", np.random.default_rng(11), res)
    return a, ma, b, mb


def test_composite_identity_outside_exact():
    a, ma, _, _ = _faces()
    comp = histmatch.makeup_target(a.pixels, ma, a.pixels, ma)
    inside = ma.lips | ma.eyes | ma.face
    assert np.abs(comp.pixels[:, inside] - a.pixels[:, inside]).max() <= 2.0 / 256.0
    assert np.array_equal(comp.pixels[:, ~inside], a.pixels[:, ~inside])


def test_composite_constant_regions():
    _, ma, _, mb = _faces()
    x = np.zeros((3, 32, 32), dtype=np.float32)
    y = np.full((3, 32, 32), 0.8, dtype=np.float32)
    comp = histmatch.makeup_target(x, ma, y, mb)
    inside = ma.lips | ma.eyes | ma.face
    assert np.abs(comp.pixels[:, inside] - 0.8).max() <= HALF_BIN
    assert np.all(comp.pixels[:, ~inside] == 0.0)


def test_composite_matches_oracle_per_region():
    a, ma, b, mb = _faces()
    comp = histmatch.makeup_target(a.pixels, ma, b.pixels, mb)
    for name in data.REGION_NAMES:
        sm, rm = ma.region(name), mb.region(name)
        for c in range(3):
            want = sort_match_oracle(a.pixels[c][sm], b.pixels[c][rm])
            assert np.abs(comp.pixels[c][sm] - want).max() <= HALF_BIN + 1e-12


def test_composite_propagates_empty_region_error():
    a, ma, b, mb = _faces()
    empty = np.zeros_like(ma.lips)
    bad = data.RegionMaskSet.__new__(data.RegionMaskSet)  # bypass validation
    bad.lips, bad.eyes, bad.face = empty, ma.eyes, ma.face
    with pytest.raises(ValueError, match="empty mask"):
        histmatch.makeup_target(a.pixels, bad, b.pixels, mb)
