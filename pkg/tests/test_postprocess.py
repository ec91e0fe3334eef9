import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import savgol_filter

from ctscatter import postprocess as pp
from ctscatter.errors import ValidationError
from ctscatter.transport import DetectorImage, ProjectionStack

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_sg_5_3_coefficients():
    assert np.allclose(pp.sg_coefficients(5, 3) * 35, [-3, 12, 17, 12, -3], atol=1e-12)


@pytest.mark.parametrize("n,w,p", [(20, 5, 3), (33, 7, 2), (16, 15, 3), (40, 11, 4)])
def test_sg_matrix_matches_reference_filter(n, w, p):
    x = np.random.default_rng(n).normal(size=n)
    ref = savgol_filter(x, w, p, mode="interp")
    assert np.allclose(pp.sg_matrix(n, w, p) @ x, ref, atol=1e-10)


@given(st.lists(finite, min_size=4, max_size=4), st.lists(finite, min_size=4, max_size=4))
@settings(max_examples=50, deadline=None)
def test_sg_reproduces_separable_cubics(cu, cv):
    u = np.linspace(-1, 1, 24)
    v = np.linspace(-1, 1, 18)
    img = np.outer(np.polyval(cv, v), np.polyval(cu, u))
    out = pp.sg_smooth(img, pp.SgFilterSpec((7, 5), 3))
    assert np.allclose(out, img, atol=1e-9 * (1 + np.abs(img).max()))


@given(arrays(np.float64, (12, 14), elements=finite), arrays(np.float64, (12, 14), elements=finite),
       st.floats(-5, 5))
@settings(max_examples=50, deadline=None)
def test_sg_is_linear(a, b, k):
    f = pp.SgFilterSpec(5, 3)
    lhs = pp.sg_smooth(a + k * b, f)
    rhs = pp.sg_smooth(a, f) + k * pp.sg_smooth(b, f)
    assert np.allclose(lhs, rhs, atol=1e-8 * (1 + np.abs(a).max() + abs(k) * np.abs(b).max()))


def test_sg_wraps_detector_images_and_reduces_noise():
    r = np.random.default_rng(0)
    img = DetectorImage(5.0 + r.normal(size=(32, 32)))
    out = pp.sg_smooth(img, pp.SgFilterSpec(9, 3))
    assert isinstance(out, DetectorImage)
    assert out.values.std() < 0.6 * img.values.std()
    assert out.values.mean() == pytest.approx(5.0, abs=0.1)


def test_sg_spec_validation_and_scaling():
    for bad in (4, 6, (5, 3)):
        with pytest.raises(ValidationError):
            pp.SgFilterSpec(bad, 3)
    with pytest.raises(ValidationError):
        pp.SgFilterSpec(5, 5)
    assert pp.SgFilterSpec.scaled((576, 800)).window == (15, 15)
    assert pp.SgFilterSpec.scaled((1152, 1600)).window == (31, 31)
    assert pp.SgFilterSpec.scaled((16, 16)).window == (5, 5)
    with pytest.raises(ValidationError, match="smaller than the SG window"):
        pp.sg_smooth(np.zeros((4, 20)), pp.SgFilterSpec(5, 3))


def _stack(angles, shape=(3, 4)):
    r = np.random.default_rng(1)
    return ProjectionStack(r.random((len(angles),) + shape), angles)


def test_interpolation_exact_at_present_angles_and_linear_between():
    s = _stack([0.0, 1.0, 2.0, 4.0])
    out = pp.interpolate_angles(s, [0.0, 0.5, 1.0, 3.0])
    assert np.array_equal(out.values[0], s.values[0]) and np.array_equal(out.values[2], s.values[1])
    assert np.allclose(out.values[1], 0.5 * (s.values[0] + s.values[1]))
    assert np.allclose(out.values[3], 0.5 * (s.values[2] + s.values[3]))


def test_interpolation_wraps_around_full_turn():
    a = np.arange(0, 2 * math.pi, math.pi / 4)[::2]  # every other of 8
    s = _stack(a)
    tgt = 7 * math.pi / 4  # between 3pi/2 and 0 (= 2pi)
    out = pp.interpolate_angles(s, [tgt]).values[0]
    assert np.allclose(out, 0.5 * (s.values[-1] + s.values[0]))
    with pytest.raises(ValidationError, match="not bracketed"):
        pp.interpolate_angles(s, [tgt], period=None)


def test_interpolation_reproduces_linear_functions_of_angle():
    a = np.array([0.1, 0.4, 0.9, 1.7])
    base, slope = np.random.default_rng(2).random((2, 3, 4))
    s = ProjectionStack(base[None] + slope[None] * a[:, None, None], a)
    tgt = np.linspace(0.1, 1.7, 11)
    out = pp.interpolate_angles(s, tgt, period=None).values
    assert np.allclose(out, base[None] + slope[None] * tgt[:, None, None], atol=1e-12)


@given(st.floats(0.0, 2 * math.pi - 1e-6))
@settings(max_examples=100, deadline=None)
def test_interpolated_values_are_convex_combinations(t):
    s = _stack(np.linspace(0, 2 * math.pi, 9)[:-1])
    out = pp.interpolate_angles(s, [t]).values[0]
    assert np.all(out >= s.values.min(axis=0) - 1e-12) and np.all(out <= s.values.max(axis=0) + 1e-12)


def test_cubic_matrix_properties():
    m = pp.cubic_matrix(8, 32)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-14)
    assert np.array_equal(pp.cubic_matrix(7, 7), np.eye(7))
    # linear ramp sampled at pixel centres is reproduced at the new centres
    xin = (np.arange(8) + 0.5) / 8
    xout = (np.arange(32) + 0.5) / 32
    assert np.allclose(m @ (3 * xin - 1), 3 * xout - 1, atol=1e-13)
    # interior cubic samples: Catmull-Rom is exact for quadratics away from borders
    q = m @ xin ** 2
    assert np.allclose(q[6:-6], xout[6:-6] ** 2, atol=1e-12)


def test_upsample_then_downsample_ramp_round_trip():
    vv, uu = np.meshgrid((np.arange(6) + 0.5) / 6, (np.arange(8) + 0.5) / 8, indexing="ij")
    img = 2 + 3 * uu - vv
    up = pp.upsample_image(img, (32, 24))
    assert up.shape == (24, 32)
    assert np.allclose(pp.downsample_image(up, 4), img, atol=1e-12)
    img_d = DetectorImage(img)
    assert isinstance(pp.upsample_image(img_d, (16, 12)), DetectorImage)
    with pytest.raises(ValidationError):
        pp.upsample_image(img, (4, 4))
    with pytest.raises(ValidationError):
        pp.downsample_image(np.zeros((5, 4)), 2)


def test_upsample_stack_shape():
    s = _stack([0.0, 1.0], shape=(4, 4))
    out = pp.upsample_stack(s, (16, 8))
    assert out.values.shape == (2, 8, 16) and np.array_equal(out.angles, s.angles)
