import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exemplar import synth, tensorimg, transforms as tf
from exemplar.transforms import IDENTITY, TransformParams, TransformRanges


def smooth_patch(seed=0, size=32):
    img = synth.random_image(np.random.default_rng(seed), 64, 64)
    return tensorimg.gaussian_blur(img, 1.0)[16:16 + size, 16:16 + size]


def test_identity_vector():
    assert np.array_equal(IDENTITY.as_vector(), [0, 0, 1, 0, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0])
    assert TransformParams.from_vector(IDENTITY.as_vector()) == IDENTITY
    assert IDENTITY.is_identity() and not TransformParams(angle=1).is_identity()


def test_default_ranges_cover_documented_intervals():
    r = TransformRanges()
    rng = np.random.default_rng(0)
    vecs = np.array([tf.sample_params(r, rng).as_vector() for _ in range(4000)])
    bounds = [(-0.2, 0.2), (-0.2, 0.2), (0.7, 1.4), (-20, 20)] + [(0.5, 2)] * 3 \
        + [(0.25, 4)] * 2 + [(0.7, 1.4)] * 2 + [(-0.1, 0.1)] * 3
    for k, (lo, hi) in enumerate(bounds):
        col = vecs[:, k]
        assert col.min() >= lo and col.max() <= hi
        # uniform draws reach within 1% of both ends
        assert col.min() < lo + 0.01 * (hi - lo) and col.max() > hi - 0.01 * (hi - lo)
    assert np.all(vecs[:, 14] == 0)   # blur family disabled by default


def test_sampling_disabled_and_deterministic():
    none = TransformRanges().with_only()
    assert tf.sample_params(none, np.random.default_rng(1)) == IDENTITY
    a = [tf.sample_params(TransformRanges(), np.random.default_rng(7)) for _ in range(2)]
    assert a[0] == a[1]


def test_disabling_family_keeps_other_streams():
    full = tf.sample_params(TransformRanges(), np.random.default_rng(3))
    part = tf.sample_params(TransformRanges().without("rotation"), np.random.default_rng(3))
    assert part.angle == 0 and part.scale == full.scale and part.pca_mul == full.pca_mul


def test_ranges_validation_and_config_round_trip():
    with pytest.raises(ValueError):
        TransformRanges(scale=(2.0, 1.0))
    with pytest.raises(ValueError):
        TransformRanges(translate_frac=-0.1)
    with pytest.raises(ValueError):
        TransformRanges(enabled={"shear"})
    r = TransformRanges(rotate_deg=7.5, blur_sigma=(0.0, 1.5)).without("color")
    items = dict(line[len("transform."):].split(" = ") for line in r.to_config())
    assert TransformRanges.from_config(items) == r


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_apply_identity(seed):
    p = np.random.default_rng(seed).random((16, 16, 3))
    assert np.abs(tf.apply(IDENTITY, p) - p).max() <= 1e-6


def test_hue_shift_only():
    rng = np.random.default_rng(0)
    hsv = np.stack([rng.random((8, 8)), rng.uniform(0.2, 1, (8, 8)), rng.uniform(0.2, 1, (8, 8))], -1)
    patch = tensorimg.hsv_to_rgb(hsv)
    out = tensorimg.rgb_to_hsv(tf.apply(TransformParams(hue_shift=0.3), patch))
    assert np.abs(out[..., 1:] - hsv[..., 1:]).max() <= 1e-6
    dh = np.mod(out[..., 0] - hsv[..., 0] - 0.3 + 0.5, 1.0) - 0.5
    assert np.abs(dh).max() <= 1e-6


def test_integer_translation_is_exact_shift():
    p = np.random.default_rng(0).random((32, 32, 3))
    out = tf.apply(TransformParams(dx=4 / 32), p)
    assert np.array_equal(out[:, 4:], p[:, :-4])
    out = tf.apply(TransformParams(dy=-3 / 32), p)
    assert np.array_equal(out[:-3], p[3:])


def test_fused_warp_matches_separate_warps():
    p = smooth_patch(2)
    params = TransformParams(dx=0.1, dy=-0.05, scale=1.2, angle=12.0)
    fused = tf.apply(params, p)
    step = tf.apply(TransformParams(scale=1.2), p)
    step = tf.apply(TransformParams(angle=12.0), step)
    step = tf.apply(TransformParams(dx=0.1, dy=-0.05), step)
    inner = slice(8, 24)
    assert np.abs(fused - step)[inner, inner].mean() <= 0.02


def test_spatial_matrix_maps_centers():
    M = tf.spatial_matrix(TransformParams(scale=1.3, angle=33), 32, 32)
    assert np.allclose(M @ [15.5, 15.5, 1], [15.5, 15.5])
    M = tf.spatial_matrix(IDENTITY, 64, 32)
    assert np.allclose(M @ [0, 0, 1], [0.5, 0.5])   # pixel-center alignment at 2x downsampling


def test_pca_contrast_scales_coordinates():
    p = smooth_patch(4)
    pca = tensorimg.fit_pixel_pca(p.reshape(-1, 3))
    out = tf.apply(TransformParams(pca_mul=(1.0, 1.0, 1.0)), p, pca=pca)
    assert np.array_equal(out, p)
    half = tf.apply(TransformParams(pca_mul=(0.5, 0.5, 0.5)), p, pca=pca)
    expected = pca.mean + 0.5 * (p - pca.mean)
    assert np.allclose(half, expected, atol=1e-12)
    with pytest.raises(ValueError):
        tf.apply(TransformParams(pca_mul=(2.0, 1.0, 1.0)), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_outputs_stay_in_range(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((12, 12, 3))
    pca = tensorimg.fit_pixel_pca(p.reshape(-1, 3))
    params = tf.sample_params(TransformRanges(blur_sigma=(0, 1)).with_only(*tf.FAMILIES), rng)
    out = tf.apply(params, p, pca=pca)
    assert out.shape == p.shape and out.min() >= 0 and out.max() <= 1
    hsv = tensorimg.rgb_to_hsv(out)
    assert hsv[..., 1:].min() >= 0 and hsv[..., 1:].max() <= 1


def test_magnitude_scaled():
    p = TransformParams(dx=0.2, scale=4.0, angle=10.0, pca_mul=(4.0, 0.25, 1.0), hue_shift=0.1)
    assert tf.magnitude_scaled(p, 0) == IDENTITY
    assert tf.magnitude_scaled(p, 1) == p
    half = tf.magnitude_scaled(p, 0.5)
    assert math.isclose(half.scale, 2.0) and math.isclose(half.angle, 5.0)
    assert np.allclose(half.pca_mul, (2.0, 0.5, 1.0)) and math.isclose(half.dx, 0.1)
    with pytest.raises(ValueError):
        tf.magnitude_scaled(p, 1.5)
