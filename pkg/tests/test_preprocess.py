import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hrl.preprocess import (AffineRanges, Atlas, affine_resample, apply_roi_mask, feature_names, histogram_standardize,
                            normalize_rescale, preprocess_volume, random_affine, roi_statistics)
from hrl.synth import generate_atlas


def _toy_atlas():
    # ROI 1 GM voxels hold 1 and 3, ROI 2 GM voxel holds 5
    roi = np.zeros((2, 2, 2), dtype=np.uint16)
    tissue = np.zeros((2, 2, 2), dtype=np.uint16)
    roi[0, 0, 0] = roi[0, 0, 1] = 1
    roi[1, 1, 1] = 2
    tissue[0, 0, 0] = tissue[0, 0, 1] = tissue[1, 1, 1] = 1
    vol = np.zeros((2, 2, 2))
    vol[0, 0, 0], vol[0, 0, 1], vol[1, 1, 1] = 1, 3, 5
    return Atlas(roi, tissue), vol


# ----------------------------------------------------------------------
# histogram standardization


def test_identity_landmarks_are_exact():
    v = np.random.default_rng(0).normal(size=(4, 5, 6))
    src = np.linspace(-3, 3, 11)
    np.testing.assert_allclose(histogram_standardize(v, src, src), v, atol=1e-12, rtol=0)


def test_single_segment():
    np.testing.assert_allclose(histogram_standardize(np.array([0.0, 5.0, 10.0]), [0, 10], [0, 1]), [0, 0.5, 1])


def test_end_segments_extrapolate():
    out = histogram_standardize(np.array([-1.0, 12.0]), [0, 10, 11], [0, 1, 3])
    np.testing.assert_allclose(out, [-0.1, 5.0])


def test_landmarks_land_on_targets():
    src = np.sort(np.random.default_rng(1).uniform(0, 10, 11)) + np.arange(11) * 1e-3
    tgt = np.linspace(0, 100, 11)
    assert np.abs(histogram_standardize(src, src, tgt) - tgt).max() < 1e-6


@pytest.mark.parametrize("src,tgt", [([0, 2, 1], [0, 1, 2]), ([0, 1, 2], [0, 2, 2]), ([0], [0])])
def test_non_monotone_rejected(src, tgt):
    with pytest.raises(ValueError):
        histogram_standardize(np.zeros(3), src, tgt)


def test_rank_order_preserved_on_random_volumes():
    rng = np.random.default_rng(2)
    for _ in range(10):
        v = rng.gamma(2.0, size=(6, 7, 5))
        src = np.sort(rng.uniform(0, 8, 11)) + np.arange(11) * 1e-3
        out = histogram_standardize(v, src, np.linspace(0, 100, 11))
        order = np.argsort(v, axis=None, kind="stable")
        assert np.all(np.diff(out.reshape(-1)[order]) >= 0)


# ----------------------------------------------------------------------
# normalization


def test_normalize_three_voxels():
    np.testing.assert_allclose(normalize_rescale(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])


def test_normalize_constant_is_half():
    assert np.all(normalize_rescale(np.full((3, 3, 3), 7.0)) == 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3, 5), elements=st.floats(-1e3, 1e3)), st.floats(0.01, 100), st.floats(-100, 100))
def test_normalize_properties(v, a, b):
    out = normalize_rescale(v)
    if np.ptp(v) < 1e-6:
        return
    assert out.min() == 0 and out.max() == 1
    np.testing.assert_allclose(normalize_rescale(out), out, atol=1e-6)
    np.testing.assert_allclose(normalize_rescale(a * v + b), out, atol=1e-6)


def test_preprocess_output_range():
    v = preprocess_volume(np.random.default_rng(3).gamma(2.0, size=(8, 8, 8)))
    assert v.dtype == np.float32 and v.min() == 0 and v.max() == 1


# ----------------------------------------------------------------------
# affine augmentation


def test_identity_ranges_bit_exact():
    v = np.random.default_rng(4).normal(size=(6, 7, 8)).astype(np.float32)
    out = random_affine(v, AffineRanges(0, 0, 0), seed=3)
    assert out is not v and np.array_equal(out, v) and out.dtype == v.dtype


def test_integer_shift_matches_roll():
    v = np.random.default_rng(5).normal(size=(6, 5, 4))
    out = affine_resample(v, np.eye(3), [1, 0, 0])
    want = np.zeros_like(v)
    want[1:] = v[:-1]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_seed_determinism():
    v = np.random.default_rng(6).normal(size=(8, 8, 8))
    r = AffineRanges()
    assert np.array_equal(random_affine(v, r, 1), random_affine(v, r, 1))
    assert not np.array_equal(random_affine(v, r, 1), random_affine(v, r, 2))


def test_negative_ranges_rejected():
    with pytest.raises(ValueError):
        AffineRanges(rotation_degrees=-1)


# ----------------------------------------------------------------------
# ROI statistics


def test_toy_means():
    atlas, vol = _toy_atlas()
    feats = roi_statistics(vol, atlas)
    assert list(feats[:2]) == [2.0, 5.0]
    assert feature_names(atlas.roi_ids)[:2] == ["roi1.gm.mean", "roi2.gm.mean"]


def test_empty_intersections_are_zero_with_warning(caplog):
    atlas, vol = _toy_atlas()
    with caplog.at_level(logging.WARNING):
        feats = roi_statistics(vol, atlas)
    assert not np.isnan(feats).any()
    assert np.all(feats[2:6] == 0)  # WM and CSF blocks
    assert "1/wm" in caplog.text


def test_constant_volume_means():
    atlas = generate_atlas((12, 12, 12), 5, seed=0)
    feats = roi_statistics(np.full(atlas.shape, 0.4), atlas, warn=False)
    means = feats[:15]
    present = means != 0
    np.testing.assert_allclose(means[present], 0.4, atol=1e-12)
    assert len(feats) == 5 * 5


def test_slot_count_is_five_r():
    assert len(feature_names(range(1, 167))) == 5 * 166
    names = feature_names(range(1, 167))
    assert names[0] == "roi1.gm.mean" and names[166] == "roi1.wm.mean" and names[332] == "roi1.csf.mean"


def test_extent_mismatch_rejected():
    atlas, _ = _toy_atlas()
    with pytest.raises(ValueError):
        roi_statistics(np.zeros((3, 2, 2)), atlas)


def test_volume_and_surface_proxies():
    roi = np.zeros((5, 5, 5), dtype=np.uint16)
    roi[1:4, 1:4, 1:4] = 1
    atlas = Atlas(roi, (roi > 0).astype(np.uint16))
    feats = roi_statistics(np.where(roi > 0, 1.0, 0.0), atlas)
    assert feats[3] == 27  # volume
    assert feats[4] == 26  # every voxel but the centre touches the outside


def test_statistics_invariant_to_label_preserving_permutation():
    rng = np.random.default_rng(7)
    atlas = generate_atlas((10, 10, 10), 4, seed=1)
    v = rng.normal(size=atlas.shape)
    base = roi_statistics(v, atlas, warn=False)[:12]
    flat_v = v.reshape(-1).copy()
    key = atlas.roi_labels.reshape(-1).astype(int) * 4 + atlas.tissue_labels.reshape(-1)
    for k in np.unique(key):
        idx = np.flatnonzero(key == k)
        flat_v[idx] = flat_v[rng.permutation(idx)]
    np.testing.assert_allclose(roi_statistics(flat_v.reshape(v.shape), atlas, warn=False)[:12], base, atol=1e-12)


# ----------------------------------------------------------------------
# masking


def test_mask_all_rois_zeroes_only_background():
    atlas = generate_atlas((10, 10, 10), 4, seed=2)
    v = np.random.default_rng(8).uniform(1, 2, size=atlas.shape)
    out = apply_roi_mask(v, atlas, atlas.roi_ids)
    assert np.all(out[atlas.roi_labels == 0] == 0)
    assert np.array_equal(out[atlas.roi_labels > 0], v[atlas.roi_labels > 0])


@pytest.mark.parametrize("keep", [[], [99]])
def test_mask_rejects_bad_keep(keep):
    atlas = generate_atlas((10, 10, 10), 4, seed=2)
    with pytest.raises(ValueError):
        apply_roi_mask(np.zeros(atlas.shape), atlas, keep)


def test_masked_statistics_agree_on_kept_rois():
    rng = np.random.default_rng(9)
    atlas = generate_atlas((12, 12, 12), 6, seed=3)
    v = rng.uniform(0.3, 1.0, size=atlas.shape)
    keep = [2, 5]
    full = roi_statistics(v, atlas, warn=False).reshape(5, 6)
    masked = roi_statistics(apply_roi_mask(v, atlas, keep), atlas, warn=False).reshape(5, 6)
    cols = [int(np.flatnonzero(atlas.roi_ids == k)[0]) for k in keep]
    np.testing.assert_array_equal(masked[:4, cols], full[:4, cols])
