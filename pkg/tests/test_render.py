"""Ray sampling, sigmoid-product weights, normalized blending."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snapslam import autodiff as ad
from snapslam import render as rn
from snapslam.errors import ConfigError

from conftest import assert_close_grad


# --- ray generation ---------------------------------------------------------

def test_camera_dirs_unit_norm():
    intr = (120.0, 120.0, 79.5, 59.5)
    px = rn.pixel_grid(160, 120)
    dirs, dir_z = rn.camera_dirs(intr, px)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(dir_z, dirs[:, 2])
    assert np.all(dir_z > 0)


def test_generate_rays_applies_pose(rng):
    intr = (100.0, 100.0, 31.5, 23.5)
    px = np.array([[31, 23], [0, 0], [63, 47]])
    # principal-point ray: optical axis
    pose = np.eye(4)
    pose[:3, 3] = [1.0, 2.0, 3.0]
    o, d, _ = rn.generate_rays(pose, intr, px)
    np.testing.assert_array_equal(o, np.tile([1.0, 2.0, 3.0], (3, 1)))
    np.testing.assert_allclose(d[0], [-0.5 / 100, -0.5 / 100, 1.0]
                               / np.linalg.norm([-0.5 / 100, -0.5 / 100, 1.0]))
    # rotating the camera rotates the rays
    from snapslam.se3 import rotation_from_axis_angle
    R = rotation_from_axis_angle(np.array([0.3, -0.2, 0.5]))
    pose2 = np.eye(4)
    pose2[:3, :3] = R
    _, d2, _ = rn.generate_rays(pose2, intr, px)
    cam, _ = rn.camera_dirs(intr, px)
    np.testing.assert_allclose(d2, cam @ R.T, atol=1e-14)


# --- sampling ---------------------------------------------------------------

def test_sample_counts_and_order(rng):
    d = rn.sample_ray(np.array([1.2, 0.0, 0.7]), 0.05, 3.0, 0.1, rng)
    assert d.shape == (3, 43)
    assert np.all(np.diff(d, axis=1) > 0)


def test_invalid_depth_all_stratified(rng):
    n = 43
    d = rn.sample_ray(np.zeros(10000 // n), 0.1, 2.1, 0.1, rng)
    edges = 0.1 + (2.1 - 0.1) * np.arange(n + 1) / n
    assert np.all(d >= edges[:-1]) and np.all(d <= edges[1:])


def test_stratum_membership_10k_draws(rng):
    # one sample per stratum => after sorting, sample i sits in stratum i
    rows = 10000 // 32 + 1
    d = rn.sample_ray(np.zeros(rows), 0.05, 3.25, 0.1, rng,
                      n_stratified=32, n_surface=0)
    edges = 0.05 + (3.25 - 0.05) * np.arange(33) / 32
    assert np.all(d >= edges[:-1]) and np.all(d <= edges[1:])


def test_guided_band_receives_eleven_samples(rng):
    depth = np.full(200, 1.5)
    d = rn.sample_ray(depth, 0.05, 3.0, 0.1, rng)
    in_band = (d >= 1.4 - 1e-12) & (d <= 1.6 + 1e-12)
    assert np.all(in_band.sum(axis=1) >= 11)


def test_deterministic_midpoints_without_rng():
    d = rn.sample_ray(np.array([1.0]), 0.5, 2.5, 0.1, None,
                      n_stratified=4, n_surface=2)
    strat = 0.5 + 2.0 * (np.arange(4) + 0.5) / 4
    band = 0.9 + 0.2 * (np.arange(2) + 0.5) / 2
    np.testing.assert_array_equal(d[0], np.sort(np.concatenate([strat, band])))
    np.testing.assert_array_equal(
        d, rn.sample_ray(np.array([1.0]), 0.5, 2.5, 0.1, None,
                         n_stratified=4, n_surface=2))


def test_far_not_beyond_near_rejected(rng):
    with pytest.raises(ConfigError):
        rn.sample_ray(np.array([1.0]), 2.0, 2.0, 0.1, rng)


def test_band_clamped_above_zero(rng):
    d = rn.sample_ray(np.array([0.01]), 0.05, 3.0, 0.5, rng)
    assert np.all(d > 0)


# --- weights ----------------------------------------------------------------

def test_weight_spot_values():
    assert rn.sdf_to_weight(np.array(0.0), 0.1) == 0.25
    sig = 1.0 / (1.0 + np.exp(-1.0))
    want = sig * (1.0 - sig)  # == sigmoid(1)*sigmoid(-1)
    got = rn.sdf_to_weight(np.array(0.1), 0.1)
    assert abs(got - want) < 1e-12
    assert abs(got - 0.19661193324148185) < 1e-9


def test_weight_symmetry_and_range(rng):
    s = rng.normal(scale=3.0, size=1000)
    w = rn.sdf_to_weight(s, 0.1)
    np.testing.assert_allclose(w, rn.sdf_to_weight(-s, 0.1), rtol=0, atol=1e-15)
    assert np.all(w > 0) and np.all(w <= 0.25)


def test_weight_invalid_truncation():
    with pytest.raises(ConfigError):
        rn.sdf_to_weight(np.array(0.0), 0.0)
    with pytest.raises(ConfigError):
        rn.sdf_to_weight(np.array(0.0), -1.0)


def test_weight_var_path_matches_host(rng):
    s = rng.normal(size=(4, 7))
    tape = ad.Tape()
    w = rn.sdf_to_weight(tape.constant(s), 0.1)
    np.testing.assert_allclose(w.value, rn.sdf_to_weight(s, 0.1), atol=1e-15)


# --- blending ---------------------------------------------------------------

def test_equal_weights_give_means(rng):
    d = np.sort(rng.uniform(0.1, 3.0, size=(5, 9)), axis=1)
    c = rng.uniform(size=(5, 9, 3))
    w = np.full((5, 9), 0.17)
    rgb, depth, valid = rn.render_rays(d, w, c)
    assert valid.all()
    np.testing.assert_allclose(rgb, c.mean(axis=1), atol=1e-12)
    np.testing.assert_allclose(depth, d.mean(axis=1), atol=1e-12)


def test_delta_weight_selects_sample(rng):
    d = np.sort(rng.uniform(0.1, 3.0, size=(1, 6)), axis=1)
    c = rng.uniform(size=(1, 6, 3))
    w = np.zeros((1, 6))
    w[0, 4] = 1.0
    rgb, depth, valid = rn.render_rays(d, w, c)
    assert valid[0]
    np.testing.assert_array_equal(rgb[0], c[0, 4])
    assert depth[0] == d[0, 4]


def test_degenerate_ray_flagged_not_raised():
    d = np.linspace(0.1, 2.0, 43)[None]
    w = np.zeros((1, 43))
    c = np.ones((1, 43, 3))
    rgb, depth, valid = rn.render_rays(d, w, c)
    assert not valid[0]
    np.testing.assert_array_equal(rgb[0], 0.0)
    assert depth[0] == 0.0


def test_weight_scale_invariance_power_of_two(rng):
    d = np.sort(rng.uniform(0.1, 3.0, size=(3, 8)), axis=1)
    c = rng.uniform(size=(3, 8, 3))
    w = rng.uniform(0.01, 0.25, size=(3, 8))
    base = rn.render_rays(d, w, c)
    scaled = rn.render_rays(d, w * 2.0 ** 7, c)
    np.testing.assert_array_equal(base[0], scaled[0])
    np.testing.assert_array_equal(base[1], scaled[1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_blend_convexity(seed):
    r = np.random.default_rng(seed)
    d = np.sort(r.uniform(0.1, 3.0, size=(4, 7)), axis=1)
    c = r.uniform(size=(4, 7, 3))
    w = r.uniform(1e-6, 0.25, size=(4, 7))
    rgb, depth, valid = rn.render_rays(d, w, c)
    eps = 1e-12
    for i in np.nonzero(valid)[0]:
        assert d[i].min() - eps <= depth[i] <= d[i].max() + eps
        assert np.all(rgb[i] >= c[i].min(axis=0) - eps)
        assert np.all(rgb[i] <= c[i].max(axis=0) + eps)


# --- tape path --------------------------------------------------------------

def make_tape_blend(rng, k=3, n=6):
    d = np.sort(rng.uniform(0.1, 3.0, size=(k, n)), axis=1)
    s_host = rng.normal(scale=0.15, size=(k, n))
    c_host = rng.uniform(size=(k, n * 3))
    tape = ad.Tape()
    s = tape.input("s", s_host)
    w = rn.sdf_to_weight(s, 0.1)
    c = tape.input("c", c_host)
    rgb, depth, valid = rn.render_rays_on_tape(tape, d, w, c)
    return tape, s, s_host, c_host, d, rgb, depth, valid


def test_tape_blend_matches_host(rng):
    tape, _, s_host, c_host, d, rgb, depth, valid = make_tape_blend(rng)
    w = rn.sdf_to_weight(s_host, 0.1)
    rgb_h, depth_h, valid_h = rn.render_rays(d, w, c_host.reshape(3, 6, 3))
    np.testing.assert_array_equal(valid, valid_h)
    np.testing.assert_allclose(rgb.value, rgb_h[valid], atol=1e-12)
    np.testing.assert_allclose(depth.value, depth_h[valid], atol=1e-12)


def test_tape_blend_gradient_matches_fd(rng):
    tape, s, s_host, c_host, d, rgb, depth, valid = make_tape_blend(rng)
    mix = np.random.default_rng(1).normal(size=rgb.value.shape)
    loss = depth.sum() + (rgb * tape.constant(mix)).sum()
    tape.backward(loss)
    got = s.grad

    h = 1e-6
    want = np.zeros_like(s_host)
    for idx in np.ndindex(*s_host.shape):
        for sgn in (1.0, -1.0):
            sp = s_host.copy()
            sp[idx] += sgn * h
            tape.forward({"s": sp})
            want[idx] += sgn * float(loss.value)
    want /= 2 * h
    assert_close_grad(got, want)


def test_tape_blend_drops_degenerate_rows(rng):
    d = np.sort(rng.uniform(0.1, 3.0, size=(3, 5)), axis=1)
    s_host = rng.normal(scale=0.1, size=(3, 5))
    s_host[1] = 50.0  # weights underflow on this ray
    tape = ad.Tape()
    w = rn.sdf_to_weight(tape.input("s", s_host), 0.1)
    c = tape.constant(rng.uniform(size=(3, 15)))
    rgb, depth, valid = rn.render_rays_on_tape(tape, d, w, c)
    np.testing.assert_array_equal(valid, [True, False, True])
    assert rgb.value.shape == (2, 3) and depth.value.shape == (2,)
    assert np.isfinite(rgb.value).all() and np.isfinite(depth.value).all()


def test_tape_blend_all_degenerate_returns_none():
    tape = ad.Tape()
    w = tape.constant(np.zeros((2, 4)))
    c = tape.constant(np.zeros((2, 12)))
    rgb, depth, valid = rn.render_rays_on_tape(tape, np.ones((2, 4)), w, c)
    assert rgb is None and depth is None and not valid.any()


# --- analytic sphere oracle -------------------------------------------------

def render_sphere_wall_depth(origin, direction, radius, far):
    """Blend-rendered depth for a ray inside a spherical room, plus the
    analytic wall intersection (the larger root of |o + t*u| = r)."""
    b = origin @ direction
    hit = -b + np.sqrt(b * b + radius * radius - origin @ origin)
    d = rn.sample_ray(np.array([hit]), 0.05, far, 0.02, None)
    pts = origin[None] + d[0][:, None] * direction[None]
    s = radius - np.linalg.norm(pts, axis=1)  # free space inside the room
    w = rn.sdf_to_weight(s, 0.02)[None]
    _, depth, valid = rn.render_rays(d, w, np.zeros((1, 43, 3)))
    assert valid[0]
    return depth[0], hit


def test_sphere_wall_intersection_depth():
    # camera at the center of a spherical room: single wall crossing per ray
    depth, hit = render_sphere_wall_depth(
        np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.5, 3.0)
    assert abs(depth - hit) < 1e-3
    # off-center, oblique ray
    u = np.array([0.3, 0.1, 1.0])
    u /= np.linalg.norm(u)
    depth, hit = render_sphere_wall_depth(
        np.array([0.4, -0.2, 0.1]), u, 1.5, 3.0)
    assert abs(depth - hit) < 1e-3


def test_render_image_plane(rng):
    intr = (30.0, 30.0, 15.5, 11.5)
    w_px, h_px = 32, 24

    def plane_sdf(p):
        return p[:, 2] - 1.0

    guide = np.ones((h_px, w_px))
    rgb, z, valid = rn.render_image(
        plane_sdf, None, np.eye(4), intr, w_px, h_px,
        near=0.05, far=3.0, t_render=0.02, band=0.02, depth_guide=guide)
    assert valid.all()
    np.testing.assert_allclose(z, 1.0, atol=1e-3)
    np.testing.assert_array_equal(rgb, 0.0)
