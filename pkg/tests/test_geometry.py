import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from remm.geometry import (Homography, affine_grid, grid_sample, make_homography, norm_to_pixel, pixel_to_norm,
                           resize_image, warp_image, warp_points)
from remm.tensor import Tensor

from oracles import apply_h


def random_h(rng) -> Homography:
    m = np.eye(3) + rng.normal(0, 0.1, (3, 3))
    m[2, :2] = rng.normal(0, 1e-3, 2)
    return Homography(m)


def test_identity_homography():
    np.testing.assert_array_equal(make_homography(0, 1, (0, 0)).m, np.eye(3))


def test_ninety_degrees_is_counterclockwise():
    p, ok = warp_points(make_homography(90, 1, (0, 0), (0, 0)), [[1.0, 0.0]])
    assert ok.all()
    np.testing.assert_allclose(p, [[0.0, 1.0]], atol=1e-15)


def test_make_homography_matches_sequential_transforms():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 256, (100, 2))
    h = make_homography(30, 0.8, (5, -3), (128, 128))
    assert h.theta_deg == 30
    c, s = math.cos(math.radians(30)), math.sin(math.radians(30))
    q = pts - 128
    q = q * 0.8
    q = np.stack([c * q[:, 0] - s * q[:, 1], s * q[:, 0] + c * q[:, 1]], axis=1)
    q = q + [5, -3] + 128
    got, _ = warp_points(h, pts)
    assert np.abs(got - q).max() < 1e-6


def test_construction_normalises_and_validates():
    h = Homography(np.diag([2.0, 2.0, 2.0]))
    assert h.m[2, 2] == 1 and h.theta_deg is None
    with pytest.raises(ValueError):
        Homography(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        make_homography(10, 0.0)
    with pytest.raises(ValueError):
        make_homography(10, -1.0)


def test_serialisation_round_trip():
    h = make_homography(37.5, 0.9, (1.25, -2), (31.5, 31.5))
    back = Homography.from_line(h.to_line())
    np.testing.assert_array_equal(back.m, h.m)
    assert back.theta_deg == 37.5
    assert Homography.from_line(" ".join(["1", "0", "0", "0", "1", "0", "0", "0", "1"])).theta_deg is None


def test_identity_grid_two_by_two():
    g = affine_grid(Homography(np.eye(3)), 2, 2)
    assert g.shape == (2, 2)
    np.testing.assert_array_equal(g.coords.reshape(-1, 2), [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])


def test_translation_one_pixel_is_half_unit_on_four_by_four():
    g0 = affine_grid(Homography(np.eye(3)), 4, 4)
    g1 = affine_grid(make_homography(0, 1, (1, 0)), 4, 4)
    np.testing.assert_allclose(g1.coords[..., 0] - g0.coords[..., 0], 0.5, atol=1e-15)
    np.testing.assert_array_equal(g1.coords[..., 1], g0.coords[..., 1])


def test_affine_grid_rejects_singular_and_empty():
    with pytest.raises(ValueError):
        affine_grid(np.array([[1, 0, 0], [2, 0, 0], [0, 0, 1.0]]), 4, 4)
    with pytest.raises(ValueError):
        affine_grid(Homography(np.eye(3)), 0, 4)


def test_grid_round_trip_through_inverse():
    rng = np.random.default_rng(1)
    for _ in range(20):
        h = random_h(rng)
        g = affine_grid(h, 9, 7)
        px = np.stack([norm_to_pixel(g.coords[..., 0], 7), norm_to_pixel(g.coords[..., 1], 9)], -1)
        back, _ = warp_points(h.inverse(), px.reshape(-1, 2))
        ys, xs = np.mgrid[0:9, 0:7]
        assert np.abs(back - np.stack([xs.ravel(), ys.ravel()], 1)).max() < 1e-5


def test_identity_grid_sample_is_exact():
    rng = np.random.default_rng(2)
    f = Tensor(rng.standard_normal((2, 3, 6, 5)).astype(np.float32))
    out = grid_sample(f, affine_grid(Homography(np.eye(3)), 6, 5))
    np.testing.assert_array_equal(out.data, f.data)


def test_grid_sample_zero_outside_and_shape_check():
    f = Tensor(np.ones((1, 1, 4, 4)))
    out = grid_sample(f, affine_grid(make_homography(0, 1, (10, 0)), 4, 4))
    assert np.all(out.data == 0)
    with pytest.raises(ValueError):
        grid_sample(Tensor(np.ones((1, 1, 1, 4))), affine_grid(Homography(np.eye(3)), 2, 2))


def test_ninety_degree_rotation_round_trip_matches_permutation():
    img = np.arange(64, dtype=np.float64).reshape(8, 8) ** 1.3  # asymmetric pattern
    h = make_homography(90, 1, (0, 0), (3.5, 3.5))
    f = Tensor(img[None, None])
    rot = grid_sample(f, affine_grid(h.inverse(), 8, 8)).data[0, 0]
    # exact permutation: out(H p) = img(p)
    expect = np.rot90(img, k=-1)  # counterclockwise in x-right/y-down frame is a clockwise array turn
    np.testing.assert_allclose(rot, expect, atol=1e-5)
    back = grid_sample(Tensor(rot[None, None]), affine_grid(h, 8, 8)).data[0, 0]
    np.testing.assert_allclose(back[1:-1, 1:-1], img[1:-1, 1:-1], atol=1e-5)


def test_warp_points_matches_direct_arithmetic():
    rng = np.random.default_rng(3)
    h = random_h(rng)
    pts = rng.uniform(-50, 50, (1000, 2))
    got, ok = warp_points(h, pts)
    assert ok.all()
    np.testing.assert_allclose(got, apply_h(h.m, pts), atol=1e-9)


def test_warp_points_flags_points_at_infinity():
    m = np.array([[1.0, 0, 0], [0, 1, 0], [1, 0, 1]])
    p, ok = warp_points(m, [[-1.0, 0.0], [1.0, 0.0]])
    assert list(ok) == [False, True]
    assert np.isnan(p[0]).all()


@settings(max_examples=60, deadline=None)
@given(st.floats(-180, 180), st.floats(0.3, 3), st.floats(-20, 20), st.floats(-20, 20),
       st.floats(-180, 180), st.floats(0.3, 3))
def test_composition_property(t1, s1, tx, ty, t2, s2):
    h1 = make_homography(t1, s1, (tx, ty), (10, 20))
    h2 = make_homography(t2, s2, (ty, tx), (-5, 3))
    pts = np.random.default_rng(0).uniform(-100, 100, (20, 2))
    a, _ = warp_points(h2, warp_points(h1, pts)[0])
    b, _ = warp_points(h2 @ h1, pts)
    assert np.abs(a - b).max() < 1e-5
    r, _ = warp_points(h1.inverse(), warp_points(h1, pts)[0])
    assert np.abs(r - pts).max() < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([90, 180, 270]), st.integers(4, 12), st.integers(0, 1000))
def test_right_angle_rotations_permute_pixels(theta, n, seed):
    img = np.random.default_rng(seed).standard_normal((n, n))
    c = (n - 1) / 2
    out = grid_sample(Tensor(img[None, None]), affine_grid(make_homography(theta, 1, (0, 0), (c, c)), n, n))
    np.testing.assert_allclose(out.data[0, 0], np.rot90(img, k=theta // 90), atol=1e-5)


def test_pixel_norm_conversions_invert():
    x = np.linspace(-3, 10, 17)
    np.testing.assert_allclose(norm_to_pixel(pixel_to_norm(x, 8), 8), x)


def test_warp_image_agrees_with_tensor_sampler():
    rng = np.random.default_rng(4)
    img = rng.random((20, 24))
    h = make_homography(33, 0.8, (2, -1), (11.5, 9.5))
    via_grid = grid_sample(Tensor(img[None, None]), affine_grid(h.inverse(), 20, 24)).data[0, 0]
    np.testing.assert_allclose(warp_image(img, h), via_grid, atol=1e-12)


def test_resize_maps_coordinates_by_scale():
    img = np.add.outer(np.arange(40.0), np.arange(40.0) * 2)  # linear ramp: value = y + 2x
    half = resize_image(img, 0.5)
    assert half.shape == (20, 20)
    ys, xs = np.mgrid[0:20, 0:20]
    np.testing.assert_allclose(half, ys / 0.5 + 2 * xs / 0.5, atol=1e-4)
