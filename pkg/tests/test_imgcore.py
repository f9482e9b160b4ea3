import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blurflow.errors import DomainError
from blurflow.imgcore import (
    build_pyramid,
    check_kernel,
    convolve,
    delta_kernel,
    derivative,
    fft_convolve,
    kernel_side_for_scale,
    level_shapes,
    resample,
    resample_flow,
    resize_kernel,
    warp_bilinear,
)

from conftest import box, random_kernel


def loop_convolve(img, k):
    """Direct double loop with replicate padding."""
    r = k.shape[0] // 2
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y - dy, 0), h - 1)
                    xx = min(max(x - dx, 0), w - 1)
                    s += k[dy + r, dx + r] * img[yy, xx]
            out[y, x] = s
    return out


def loop_convolve_periodic(img, k):
    r = k.shape[0] // 2
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out += k[dy + r, dx + r] * np.roll(img, (dy, dx), axis=(0, 1))
    return out


def test_delta_kernel_is_identity(rng):
    img = rng.random((12, 9))
    assert np.array_equal(convolve(img, delta_kernel(5)), img)
    assert np.array_equal(convolve(img, delta_kernel(3), boundary="periodic"), img)


def test_constant_image_preserved(rng):
    img = np.full((10, 10), 0.37)
    out = convolve(img, random_kernel(rng, 7))
    assert np.allclose(out, 0.37, atol=1e-12)


def test_ramp_box_matches_loop_oracle():
    img = np.add.outer(np.arange(5.0), 2 * np.arange(5.0)) / 15.0
    assert np.allclose(convolve(img, box(3)), loop_convolve(img, box(3)), atol=1e-6)


def test_asymmetric_kernel_orientation(rng):
    img = rng.random((11, 13))
    k = random_kernel(rng, 5)
    assert np.allclose(convolve(img, k), loop_convolve(img, k), atol=1e-12)
    assert np.allclose(convolve(img, k, boundary="periodic"), loop_convolve_periodic(img, k), atol=1e-12)


@pytest.mark.parametrize("side", [3, 9, 17, 21])
def test_spatial_and_fft_paths_agree(rng, side):
    img = rng.random((32, 40))
    k = random_kernel(rng, side)
    spatial = loop_convolve_periodic(img, k)
    assert np.allclose(fft_convolve(img, k), spatial, atol=1e-5)
    assert np.allclose(convolve(img, k, boundary="periodic"), spatial, atol=1e-5)


def test_color_channels_convolved_independently(rng):
    img = rng.random((10, 10, 3))
    k = random_kernel(rng, 3)
    out = convolve(img, k)
    for c in range(3):
        assert np.allclose(out[..., c], convolve(img[..., c], k))


def test_kernel_larger_than_image_rejected(rng):
    with pytest.raises(DomainError):
        convolve(rng.random((5, 5)), box(7))


def test_check_kernel_invariants():
    with pytest.raises(DomainError):
        check_kernel(np.ones((2, 2)) / 4)
    with pytest.raises(DomainError):
        check_kernel(np.array([[0.5, -0.1, 0.6]]).reshape(1, 3))
    with pytest.raises(DomainError):
        check_kernel(np.full((3, 3), 0.2))
    check_kernel(box(5))


@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    seed=st.integers(0, 2**31),
    boundary=st.sampled_from(["replicate", "periodic"]),
)
def test_convolution_linearity(a, b, seed, boundary):
    r = np.random.default_rng(seed)
    i1, i2 = r.random((16, 16)), r.random((16, 16))
    k = random_kernel(r, 5)
    lhs = convolve(a * i1 + b * i2, k, boundary)
    rhs = a * convolve(i1, k, boundary) + b * convolve(i2, k, boundary)
    assert np.allclose(lhs, rhs, atol=1e-6)


@given(seed=st.integers(0, 2**31), s1=st.sampled_from([3, 5, 7]), s2=st.sampled_from([3, 5, 9]))
def test_kernel_commutativity_interior(seed, s1, s2):
    r = np.random.default_rng(seed)
    img = r.random((32, 32))
    k1, k2 = random_kernel(r, s1), random_kernel(r, s2)
    a = convolve(convolve(img, k1), k2)
    b = convolve(convolve(img, k2), k1)
    m = (s1 + s2) // 2 + 1
    assert np.allclose(a[m:-m, m:-m], b[m:-m, m:-m], atol=1e-5)


def test_derivative_constant_is_zero():
    for which in ("dx", "dy", "dxx", "dyy", "dxy"):
        assert np.all(derivative(np.full((6, 7), 0.3), which) == 0)


def test_derivative_of_ramp():
    w = 10
    img = np.tile(np.arange(w) / w, (6, 1))
    d = derivative(img, "dx")
    assert np.allclose(d[:, 1:-1], 1.0 / w)
    assert np.allclose(derivative(img, "dy"), 0.0)


def test_mixed_partials_commute(rng):
    from blurflow.imgcore import _dx, _dy

    img = rng.random((7, 7))
    assert np.allclose(_dx(_dy(img))[1:-1, 1:-1], _dy(_dx(img))[1:-1, 1:-1], atol=1e-10)
    assert np.allclose(derivative(img, "dxy"), _dx(_dy(img)))


def test_derivative_too_small():
    with pytest.raises(DomainError):
        derivative(np.zeros((2, 5)), "dx")


def test_warp_zero_flow_identity(rng):
    img = rng.random((8, 9))
    out, mask = warp_bilinear(img, np.zeros((8, 9, 2)))
    assert np.array_equal(out, img)
    assert mask.all()


def test_warp_integer_shift(rng):
    img = rng.random((10, 12))
    flow = np.zeros((10, 12, 2))
    flow[..., 0] = 2
    out, mask = warp_bilinear(img, flow)
    assert np.array_equal(out[:, :-2], img[:, 2:])
    assert not mask[:, -2:].any() and mask[:, :-2].all()


def test_warp_half_pixel_midpoint():
    img = np.tile(np.arange(8.0) ** 2, (5, 1))
    flow = np.zeros((5, 8, 2))
    flow[..., 0] = 0.5
    out, _ = warp_bilinear(img, flow)
    expect = 0.5 * (np.arange(7.0) ** 2 + np.arange(1.0, 8.0) ** 2)
    assert np.allclose(out[:, :-1], expect, atol=1e-12)


@given(tx=st.integers(-3, 3), ty=st.integers(-3, 3), seed=st.integers(0, 2**31))
def test_warp_inverse_recovers_interior(tx, ty, seed):
    r = np.random.default_rng(seed)
    img = r.random((16, 16))
    fwd = np.zeros((16, 16, 2))
    fwd[..., 0], fwd[..., 1] = tx, ty
    shifted, _ = warp_bilinear(img, fwd)
    back, _ = warp_bilinear(shifted, -fwd)
    m = 4
    assert np.allclose(back[m:-m, m:-m], img[m:-m, m:-m], atol=1e-6)


def test_warp_shape_mismatch():
    with pytest.raises(DomainError):
        warp_bilinear(np.zeros((4, 4)), np.zeros((4, 5, 2)))


def test_resample_unit_and_constant(rng):
    img = rng.random((9, 11))
    assert np.array_equal(resample(img, 1.0), img)
    out = resample(np.full((9, 11), 0.25), 0.63)
    assert np.allclose(out, 0.25)


def test_resample_flow_rescales_vectors():
    out = resample_flow(np.ones((5, 6, 2)), 2.0)
    assert out.shape == (10, 12, 2)
    assert np.allclose(out, 2.0)


def test_resample_degenerate():
    with pytest.raises(DomainError):
        resample(np.zeros((3, 3)), 0.1)


def test_down_up_within_one_smoothing_pass(rng):
    from scipy.ndimage import uniform_filter

    img = rng.random((32, 32))
    rt = resample(resample(img, 0.5), 2.0)
    smooth = uniform_filter(img, 3, mode="nearest")
    # the round trip loses detail but stays as close to the image as a 3x3 box pass
    err_rt = np.abs(rt - smooth)[2:-2, 2:-2].mean()
    err_id = np.abs(img - smooth)[2:-2, 2:-2].mean()
    assert err_rt <= err_id


def test_pyramid_sides_100():
    assert [s[0] for s in level_shapes((100, 100), 0.8, 16)] == [100, 80, 64, 51, 41, 33, 26, 21, 17]
    p = build_pyramid(np.zeros((100, 100)), 0.8, 16)
    assert [s[0] for s in p.shapes] == [17, 21, 26, 33, 41, 51, 64, 80, 100]


def test_pyramid_areas_strictly_increase(rng):
    p = build_pyramid(rng.random((70, 45)), 0.8, 16)
    areas = [s[0] * s[1] for s in p.shapes]
    assert all(a < b for a, b in zip(areas, areas[1:]))
    assert p.levels[-1].shape == (70, 45)


def test_pyramid_single_level():
    p = build_pyramid(np.zeros((20, 20)), 0.8, 20)
    assert len(p) == 1


def test_pyramid_bad_eta():
    with pytest.raises(DomainError):
        build_pyramid(np.zeros((20, 20)), 1.0)


def test_kernel_side_for_scale():
    assert kernel_side_for_scale(15, 1.0) == 15
    assert kernel_side_for_scale(15, 0.1) == 3
    assert kernel_side_for_scale(15, 0.8) % 2 == 1


def test_resize_kernel_keeps_invariants(rng):
    k = random_kernel(rng, 15)
    for side in (3, 7, 15, 21):
        check_kernel(resize_kernel(k, side))
