"""Query quantization: snapping, one-blob, hash features, codebook, assembly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from snapslam import autodiff as ad
from snapslam import quantize as qz
from snapslam.config import default_config
from snapslam.errors import ConfigError
from snapslam.tsdf import TsdfGrid

from conftest import assert_close_grad, fd_grad


def make_pipeline(tsdf_grid=None, **overrides):
    cfg = default_config()
    for k, v in overrides.items():
        cfg.set(k, v)
    store = ad.ParamStore()
    rng = np.random.default_rng(3)
    pipe = qz.QueryPipeline(store, cfg, [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0],
                            rng, tsdf_grid=tsdf_grid)
    return pipe, store


# --- level ladder -----------------------------------------------------------

def test_level_resolutions_default_ladder():
    assert qz.level_resolutions(8, 16, 256) == [16, 24, 35, 53, 78, 116, 172, 256]


def test_level_resolutions_must_increase():
    with pytest.raises(ConfigError):
        qz.level_resolutions(16, 16, 17)


# --- snapping ---------------------------------------------------------------

def test_snap_vertex_fixed_point():
    p = np.array([[0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(qz.snap_coordinate(p, 12800), p)


def test_snap_brute_force_oracle(rng):
    R = 8
    verts = np.arange(R + 1) / R
    pts = rng.uniform(0, 1, size=(1000, 3))
    snapped = qz.snap_coordinate(pts, R)
    for axis in range(3):
        nearest = verts[np.argmin(np.abs(pts[:, axis][:, None] - verts[None]), axis=1)]
        np.testing.assert_array_equal(snapped[:, axis], nearest)


def test_snap_max_error_bound(rng):
    R = 12800
    pts = rng.uniform(0, 1, size=(2000, 3))
    err = np.abs(pts - qz.snap_coordinate(pts, R))
    assert err.max() <= 0.5 / R + 1e-15


def test_snap_rounds_half_up():
    # exact midpoint between vertices 0 and 1 at R=4 goes up
    np.testing.assert_array_equal(
        qz.snap_coordinate(np.array([[0.125, 0.375, 0.625]]), 4),
        [[0.25, 0.5, 0.75]])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
       st.integers(2, 10000))
def test_snap_idempotent(x, y, z, R):
    once = qz.snap_coordinate(np.array([[x, y, z]]), R)
    np.testing.assert_array_equal(qz.snap_coordinate(once, R), once)


def test_snap_rejects_degenerate_lattice():
    with pytest.raises(ConfigError):
        qz.snap_coordinate(np.zeros((1, 3)), 1)


# --- one-blob ---------------------------------------------------------------

def test_one_blob_peak_at_bin_center():
    k = 16
    center = (7 + 0.5) / k
    act = qz.one_blob_encode(np.array([[center, center, center]]), k)
    per_axis = act.reshape(3, k)
    assert np.all(np.argmax(per_axis, axis=1) == 7)


def test_one_blob_symmetry_at_half():
    k = 16
    act = qz.one_blob_encode(np.array([[0.5, 0.5, 0.5]]), k).reshape(3, k)
    np.testing.assert_allclose(act, act[:, ::-1], atol=1e-15)


def test_one_blob_mass_closed_form(rng):
    k = 16
    sigma = 1.0 / k
    pts = rng.uniform(0, 1, size=(100, 3))
    act = qz.one_blob_encode(pts, k).reshape(-1, 3, k)
    total = act.sum(axis=2)
    want = 0.5 * (erf((1 - pts) / (sigma * np.sqrt(2)))
                  - erf((0 - pts) / (sigma * np.sqrt(2))))
    np.testing.assert_allclose(total, want, atol=1e-6)


def test_one_blob_rejects_tiny_k():
    with pytest.raises(ConfigError):
        qz.one_blob_encode(np.zeros((1, 3)), 1)


# --- codebook ---------------------------------------------------------------

def test_init_codebook_bernoulli_support():
    rng = np.random.default_rng(0)
    codes = qz.init_codebook(128, 16, rng)
    norms = np.linalg.norm(codes, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    # un-normalizing must recover exact {0,1} patterns
    for row in codes:
        scaled = row / row.max()
        np.testing.assert_allclose(scaled[scaled > 1e-9], 1.0, atol=1e-9)
        assert np.all((scaled > 1 - 1e-9) | (np.abs(scaled) < 1e-9))


def test_init_codebook_seeded_determinism():
    a = qz.init_codebook(64, 16, np.random.default_rng(9))
    b = qz.init_codebook(64, 16, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_init_codebook_uniform_mode():
    codes = qz.init_codebook(32, 16, np.random.default_rng(1), mode="uniform")
    np.testing.assert_allclose(np.linalg.norm(codes, axis=1), 1.0, atol=1e-12)
    assert len(np.unique(np.round(codes, 6))) > 40  # not a lattice


def test_nearest_code_single_candidate(rng):
    g = rng.standard_normal((10, 16))
    assert np.all(qz.nearest_code(g, rng.standard_normal((1, 16))) == 0)


def test_nearest_code_exact_member():
    rng = np.random.default_rng(5)
    codes = qz.init_codebook(128, 16, rng)
    picks = rng.integers(0, 128, 50)
    idx = qz.nearest_code(codes[picks], codes)
    # an exact membership query returns a code at distance ~0; allow for
    # duplicate Bernoulli patterns by comparing codes, not indices
    np.testing.assert_allclose(codes[idx], codes[picks], atol=1e-12)


def test_nearest_code_brute_force_oracle(rng):
    codes = qz.init_codebook(128, 16, np.random.default_rng(2))
    g = rng.standard_normal((1000, 16))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    got = qz.nearest_code(g, codes)
    want = np.array([np.argmin(np.sum((codes - row) ** 2, axis=1)) for row in g])
    np.testing.assert_array_equal(got, want)


def test_normalize_codes():
    store = ad.ParamStore()
    store.add("codebook/codes", np.random.default_rng(0).uniform(0.1, 3.0, (8, 4)))
    qz.normalize_codes(store)
    np.testing.assert_allclose(np.linalg.norm(store.value("codebook/codes"), axis=1),
                               1.0, atol=1e-12)


# --- hash features ----------------------------------------------------------

def test_hash_feature_at_vertex_equals_stored(rng):
    pipe, store = make_pipeline()
    tables = store.value("grid/tables")
    res0 = pipe.level_res[0]
    vert = np.array([[3, 5, 7]], dtype=np.int64)
    u = vert.astype(np.float64) / res0
    t = ad.Tape()
    g = pipe.hash_features(t, u)
    # level-0 contribution (pre-normalization) equals the vertex's table row
    idx = pipe._hash_indices(vert[:, None, :], res0)[0, 0]
    raw_norm = np.linalg.norm(  # reconstruct the raw vector from normalized g
        _raw_feature_oracle(pipe, tables, u)[0])
    np.testing.assert_allclose(g.value[0, :2] * raw_norm, tables[idx], atol=1e-12)


def _raw_feature_oracle(pipe, tables, u):
    """Independent convex-combination readback (no shared code path)."""
    m = u.shape[0]
    out = np.zeros((m, pipe.n_levels * pipe.n_feats))
    for lvl, res in enumerate(pipe.level_res):
        scaled = u * res
        i0 = np.minimum(scaled.astype(np.int64), res - 1)
        f = scaled - i0
        acc = np.zeros((m, pipe.n_feats))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    corner = i0 + [dx, dy, dz]
                    h = (corner[:, 0].astype(np.uint64) * np.uint64(1)
                         ^ corner[:, 1].astype(np.uint64) * np.uint64(2654435761)
                         ^ corner[:, 2].astype(np.uint64) * np.uint64(805459861))
                    row = (h & np.uint64(pipe.table_size - 1)).astype(np.int64)
                    row += lvl * pipe.table_size
                    w = ((f[:, 0] if dx else 1 - f[:, 0])
                         * (f[:, 1] if dy else 1 - f[:, 1])
                         * (f[:, 2] if dz else 1 - f[:, 2]))
                    acc += w[:, None] * tables[row]
        out[:, lvl * pipe.n_feats:(lvl + 1) * pipe.n_feats] = acc
    return out


def test_hash_feature_matches_convex_oracle(rng):
    pipe, store = make_pipeline()
    u = rng.uniform(0, 1, size=(200, 3))
    t = ad.Tape()
    got = pipe.hash_features(t, u).value
    raw = _raw_feature_oracle(pipe, store.value("grid/tables"), u)
    want = raw / np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_hash_feature_unit_norm(rng):
    pipe, _ = make_pipeline()
    u = rng.uniform(0, 1, size=(1000, 3))
    t = ad.Tape()
    g = pipe.hash_features(t, u)
    np.testing.assert_allclose(np.linalg.norm(g.value, axis=1), 1.0, atol=1e-9)


def test_hash_feature_gradient_reaches_tables(rng):
    # tiny tables so the finite-difference sweep stays tractable; trained-ish
    # entry scale keeps the normalization curvature out of the FD noise
    pipe, store = make_pipeline(**{"quantize.hash_table_size": 64,
                                   "quantize.hash_levels": 2})
    store.set_value("grid/tables",
                    rng.uniform(-0.5, 0.5, store.value("grid/tables").shape))
    u = rng.uniform(0.1, 0.9, size=(4, 3))
    t = ad.Tape()
    g = pipe.hash_features(t, u)
    y = ad.reduce_sum(ad.square(g))
    store.zero_grad()
    t.backward(y)
    assert_close_grad(store.grad("grid/tables"),
                      fd_grad(t, y, store, "grid/tables", h=1e-7), tol=1e-4)


def test_hash_feature_gradient_sparsity(rng):
    pipe, store = make_pipeline()
    u = rng.uniform(0.4, 0.6, size=(2, 3))
    t = ad.Tape()
    y = ad.reduce_sum(pipe.hash_features(t, u))
    store.zero_grad()
    t.backward(y)
    touched = np.any(store.grad("grid/tables") != 0, axis=1).sum()
    assert 0 < touched <= 2 * 8 * pipe.n_levels


# --- tsdf prior -------------------------------------------------------------

def constant_grid(value):
    g = TsdfGrid([-1.0] * 3, [1.0] * 3, resolution=16, truncation_voxels=10)
    g.values[:] = value
    return g


def test_tsdf_prior_tanh_values():
    pipe, _ = make_pipeline(tsdf_grid=constant_grid(0.0))
    np.testing.assert_allclose(pipe.tsdf_prior(np.full((1, 3), 0.5)), 0.0, atol=1e-15)
    pipe2, _ = make_pipeline(tsdf_grid=constant_grid(1.0))
    np.testing.assert_allclose(pipe2.tsdf_prior(np.full((1, 3), 0.5)),
                               np.tanh(1.0), atol=1e-12)
    assert abs(float(np.tanh(1.0)) - 0.76159) < 1e-5


def test_tsdf_prior_range_and_sign(rng):
    grid = constant_grid(0.0)
    grid.values = rng.uniform(-1, 1, grid.values.shape)
    pipe, _ = make_pipeline(tsdf_grid=grid)
    u = rng.uniform(0, 1, size=(500, 3))
    raw = grid.trilinear(pipe.to_world(u))
    out = pipe.tsdf_prior(u)
    assert np.all(np.abs(out) < 1.0)
    assert np.all(np.sign(out) == np.sign(raw))


def test_tsdf_prior_outside_volume_counter():
    small = TsdfGrid([-0.2] * 3, [0.2] * 3, resolution=8, truncation_voxels=10)
    small.values[:] = -0.5
    pipe, _ = make_pipeline(tsdf_grid=small)
    out = pipe.tsdf_prior(np.array([[0.99, 0.99, 0.99]]))  # world (0.98,...) — outside
    np.testing.assert_allclose(out, np.tanh(1.0), atol=1e-12)
    assert pipe.counters["prior_out_of_volume"] == 1


def test_tsdf_prior_disabled_modes():
    pipe, _ = make_pipeline(tsdf_grid=constant_grid(0.8),
                            **{"quantize.tanh_enabled": False})
    np.testing.assert_allclose(pipe.tsdf_prior(np.full((2, 3), 0.5)), 0.8, atol=1e-12)
    pipe2, _ = make_pipeline(tsdf_grid=constant_grid(0.8),
                             **{"quantize.tsdf_prior_enabled": False})
    np.testing.assert_array_equal(pipe2.tsdf_prior(np.full((2, 3), 0.5)), [0.0, 0.0])


# --- assembly ---------------------------------------------------------------

def test_assemble_width_and_composition(rng):
    pipe, store = make_pipeline(tsdf_grid=constant_grid(0.3))
    assert pipe.query_width == 68
    pts = rng.uniform(-0.9, 0.9, size=(7, 3))
    t = ad.Tape()
    batch = pipe.assemble(t, pts)
    assert batch.x.shape == (7, 68)
    # compositional: each slot equals its standalone operation
    u = pipe.normalize_points(pts)
    p_snap = qz.snap_coordinate(u, pipe.lattice_res)
    np.testing.assert_array_equal(batch.x.value[:, :3], p_snap)
    np.testing.assert_array_equal(batch.x.value[:, 3:51],
                                  qz.one_blob_encode(p_snap, 16))
    np.testing.assert_allclose(batch.x.value[:, 51:67],
                               store.value("codebook/codes")[batch.code_idx],
                               atol=1e-12)
    np.testing.assert_allclose(batch.x.value[:, 67], np.tanh(0.3), atol=1e-12)


def test_assemble_purity(rng):
    pipe, _ = make_pipeline()
    pts = rng.uniform(-0.9, 0.9, size=(5, 3))
    t = ad.Tape()
    a = pipe.assemble(t, pts)
    b = pipe.assemble(t, pts)
    np.testing.assert_array_equal(a.x.value, b.x.value)
    np.testing.assert_array_equal(a.code_idx, b.code_idx)


def test_assemble_code_slot_is_exact_code(rng):
    pipe, store = make_pipeline()
    t = ad.Tape()
    batch = pipe.assemble(t, rng.uniform(-0.5, 0.5, size=(64, 3)))
    codes = store.value("codebook/codes")
    np.testing.assert_allclose(batch.x.value[:, 51:67], codes[batch.code_idx],
                               atol=1e-12)
    assert len(np.unique(batch.code_idx)) <= pipe.n_codes
    assert pipe.code_usage.sum() == 64


def test_assemble_codebook_disabled_passthrough(rng):
    pipe, _ = make_pipeline(**{"quantize.codebook_enabled": False})
    t = ad.Tape()
    batch = pipe.assemble(t, rng.uniform(-0.5, 0.5, size=(6, 3)))
    assert batch.code_idx is None
    np.testing.assert_array_equal(batch.x.value[:, 51:67], batch.g.value)
    assert batch.x.shape == (6, 68)


def test_assemble_snap_disabled_keeps_width(rng):
    pipe, _ = make_pipeline(**{"quantize.snap_enabled": False})
    pts = rng.uniform(-0.5, 0.5, size=(6, 3))
    t = ad.Tape()
    batch = pipe.assemble(t, pts)
    assert batch.x.shape == (6, 68)
    np.testing.assert_allclose(batch.x.value[:, :3], pipe.normalize_points(pts),
                               atol=1e-15)


def test_assemble_out_of_bounds_clamps(rng):
    pipe, _ = make_pipeline()
    t = ad.Tape()
    batch = pipe.assemble(t, np.array([[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    assert pipe.counters["points_clamped"] == 1
    assert np.all(batch.p_snapped <= 1.0)


def test_assemble_pose_path_gradient(rng):
    """FD through the full assembly when the points live on the tape."""
    pipe, store = make_pipeline(tsdf_grid=constant_grid(0.2))
    store.set_value("grid/tables",
                    rng.uniform(-0.5, 0.5, store.value("grid/tables").shape))
    store.add("pts", rng.uniform(-0.8, 0.8, size=(5, 3)))
    t = ad.Tape()
    pts_var = t.param(store, "pts")
    batch = pipe.assemble(t, pts_var.value, points_var=pts_var)
    probe = t.constant(rng.standard_normal((5, 68)))
    y = ad.reduce_sum(batch.x * probe)
    store.zero_grad()
    t.backward(y)
    assert np.any(store.grad("pts") != 0)
    assert_close_grad(store.grad("pts"), fd_grad(t, y, store, "pts"), tol=1e-4)


def test_assemble_distinct_codes_bounded(rng):
    pipe, _ = make_pipeline(**{"quantize.codebook_size": 8})
    t = ad.Tape()
    batch = pipe.assemble(t, rng.uniform(-0.9, 0.9, size=(500, 3)))
    distinct = np.unique(np.round(batch.x.value[:, 51:67], 12), axis=0)
    assert len(distinct) <= 8
