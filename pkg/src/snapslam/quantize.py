"""Quantized query assembly.

A continuous world point p becomes the network input

    q = [ p_snap | oneblob(p_snap) | code(g(p)) | tanh(tsdf(p_snap)) ]

with every slot drawn from a finite vocabulary: p_snap lives on a lattice
(12800³ over the unit cube by default), the one-blob encoding is a function
of p_snap, the hash-grid feature g(p) is replaced by its nearest codebook
code, and the TSDF prior is interpolated at p_snap.  Default query width is
3 + 48 + 16 + 1 = 68.

Gradient routing is the subtle part:
  * the code slot uses a straight-through substitution g + sg(code - g), so
    its forward value is the code while gradients reach the hash tables —
    and, through the trilinear interpolation weights, the camera pose;
  * hash-feature interpolation happens at the RAW point (pre-snap), which is
    exactly what keeps the pose chain differentiable (the snapped slots are
    piecewise constant and contribute no gradient);
  * the commitment terms split by stop-gradient: ||sg(code) - g|| trains the
    tables, ||code - sg(g)|| trains the codebook.

Ablation switches (snap/codebook/prior/tanh, grid-at-snapped) reroute the
same pipeline rather than forking it; disabled slots keep the query width
stable so the networks never need rebuilding.
"""

import numpy as np
from scipy.special import erf

from . import autodiff as ad
from .errors import ConfigError

HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)

# corner order: x bit, then y, then z (z fastest)
CORNER_OFFSETS = np.array([[dx, dy, dz] for dx in (0, 1)
                           for dy in (0, 1) for dz in (0, 1)], dtype=np.int64)
_BX = CORNER_OFFSETS[:, 0]
_BY = CORNER_OFFSETS[:, 1]
_BZ = CORNER_OFFSETS[:, 2]


def level_resolutions(n_levels, res_min, res_max):
    """Geometric ladder from res_min to res_max inclusive, rounded."""
    if n_levels == 1:
        return [int(res_min)]
    b = (res_max / res_min) ** (1.0 / (n_levels - 1))
    res = [int(np.rint(res_min * b ** i)) for i in range(n_levels)]
    if any(r2 <= r1 for r1, r2 in zip(res, res[1:])):
        raise ConfigError(f"hash level resolutions not strictly increasing: {res}")
    return res


def snap_coordinate(p, resolution):
    """Nearest lattice vertex i/R per axis, round-half-up. p in [0,1]^3."""
    if resolution < 2:
        raise ConfigError("lattice resolution must be >= 2")
    p = np.asarray(p, dtype=np.float64)
    return np.floor(p * resolution + 0.5) / resolution


def one_blob_encode(p, bins):
    """Per-axis Gaussian-kernel bin integrals (σ = one bin width).

    For coordinate c, bin j holds ∫ over [j/k,(j+1)/k] of N(x; c, σ).
    Returns (..., 3*bins), axes concatenated x|y|z.
    """
    if bins < 2:
        raise ConfigError("one-blob bins must be >= 2")
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    sigma = 1.0 / bins
    edges = np.linspace(0.0, 1.0, bins + 1)
    # cdf at every edge for every axis-coordinate: (M, 3, bins+1)
    z = (edges[None, None, :] - p[:, :, None]) / (sigma * np.sqrt(2.0))
    cdf = 0.5 * (1.0 + erf(z))
    act = cdf[:, :, 1:] - cdf[:, :, :-1]
    return act.reshape(p.shape[0], 3 * bins)


def init_codebook(n_codes, dim, rng, mode="bernoulli"):
    """Unit-length codes from {0,1}^dim Bernoulli(0.5) draws (or U(0,1) for
    the ablation); all-zero rows are redrawn before normalizing."""
    if n_codes < 1:
        raise ConfigError("codebook must hold at least one code")
    if mode == "bernoulli":
        codes = rng.integers(0, 2, size=(n_codes, dim)).astype(np.float64)
    elif mode == "uniform":
        codes = rng.uniform(0.0, 1.0, size=(n_codes, dim))
    else:
        raise ConfigError(f"unknown codebook init '{mode}'")
    while True:
        dead = ~np.any(codes, axis=1)
        if not dead.any():
            break
        if mode == "bernoulli":
            codes[dead] = rng.integers(0, 2, size=(int(dead.sum()), dim))
        else:
            codes[dead] = rng.uniform(0.0, 1.0, size=(int(dead.sum()), dim))
    return codes / np.linalg.norm(codes, axis=1, keepdims=True)


def nearest_code(features, codes):
    """Argmin_b ||e_b - g||² per row; ties resolve to the lowest index by
    argmin's first-occurrence rule. Uses the expanded quadratic form so the
    (M,B) distance matrix is the only large temporary."""
    g2 = np.sum(features * features, axis=1, keepdims=True)
    e2 = np.sum(codes * codes, axis=1)
    d2 = g2 + e2[None, :] - 2.0 * features @ codes.T
    return np.argmin(d2, axis=1)


def normalize_codes(store, name="codebook/codes"):
    """Renormalize every code to unit length (runs after each optimizer
    iteration; the zero guard mirrors the feature-normalization guard)."""
    codes = store.value(name)
    norms = np.linalg.norm(codes, axis=1, keepdims=True)
    store.set_value(name, codes / np.maximum(norms, 1e-12))


class QueryBatch:
    """One assembled batch: the network input plus the pieces losses need."""

    __slots__ = ("x", "g", "code_rows", "code_idx", "prior", "p_snapped")

    def __init__(self, x, g, code_rows, code_idx, prior, p_snapped):
        self.x = x                  # (M, width) Var — network input
        self.g = g                  # (M, L·F) Var — normalized hash feature
        self.code_rows = code_rows  # (M, L·F) Var gather of selected codes, or None
        self.code_idx = code_idx    # (M,) int array, or None
        self.prior = prior          # (M,) host array (post-tanh)
        self.p_snapped = p_snapped  # (M, 3) host array, unit cube


class QueryPipeline:
    """Owns the quantization state (hash tables + codebook + bounds) and
    assembles QueryBatches on a caller-supplied tape."""

    def __init__(self, store, cfg, lo, hi, rng, tsdf_grid=None):
        self.store = store
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.extent = self.hi - self.lo
        if not np.all(self.extent > 0):
            raise ConfigError("scene bounds must satisfy hi > lo per axis")
        self.lattice_res = cfg["quantize.lattice_resolution"]
        self.bins = cfg["quantize.oneblob_bins"]
        self.n_levels = cfg["quantize.hash_levels"]
        self.n_feats = cfg["quantize.hash_features"]
        self.table_size = cfg["quantize.hash_table_size"]
        if self.table_size & (self.table_size - 1):
            raise ConfigError("quantize.hash_table_size must be a power of two")
        self.level_res = level_resolutions(
            self.n_levels, cfg["quantize.hash_res_min"], cfg["quantize.hash_res_max"])
        self.n_codes = cfg["quantize.codebook_size"]
        self.snap_enabled = cfg["quantize.snap_enabled"]
        self.codebook_enabled = cfg["quantize.codebook_enabled"]
        self.prior_enabled = cfg["quantize.tsdf_prior_enabled"]
        self.tanh_enabled = cfg["quantize.tanh_enabled"]
        self.grid_at_snapped = cfg["quantize.grid_at_snapped"]
        self.tsdf_grid = tsdf_grid
        self.counters = {"points_clamped": 0, "prior_out_of_volume": 0}
        self.code_usage = np.zeros(self.n_codes, dtype=np.int64)

        feat_dim = self.n_levels * self.n_feats
        if "grid/tables" not in store:
            store.add("grid/tables",
                      rng.uniform(-1e-4, 1e-4,
                                  size=(self.n_levels * self.table_size, self.n_feats)),
                      rate=cfg["opt.lr_grid"])
            store.add("codebook/codes",
                      init_codebook(self.n_codes, feat_dim, rng,
                                    cfg["quantize.codebook_init"]),
                      rate=cfg["opt.lr_codes"])

    @property
    def query_width(self):
        return 3 + 3 * self.bins + self.n_levels * self.n_feats + 1

    def normalize_points(self, p_world):
        return (np.asarray(p_world, dtype=np.float64) - self.lo) / self.extent

    def to_world(self, u):
        return self.lo + np.asarray(u) * self.extent

    def _hash_indices(self, corners, level_res):
        """XOR spatial hash of integer corners (M,8,3) -> (M,8) table rows."""
        c = corners.astype(np.uint64)
        h = (c[..., 0] * HASH_PRIMES[0]
             ^ c[..., 1] * HASH_PRIMES[1]
             ^ c[..., 2] * HASH_PRIMES[2])
        return (h & np.uint64(self.table_size - 1)).astype(np.int64)

    def hash_features(self, tape, u_host, u_var=None):
        """Normalized multi-level feature g at raw points.

        u_host: (M,3) clamped unit-cube coords (always needed, for indexing);
        u_var: optional (M,3) Var of the same points — when given, the
        trilinear weights are recorded on the tape so gradients reach the
        pose that produced the points.
        """
        tables = tape.param(self.store, "grid/tables")
        m = u_host.shape[0]
        level_feats = []
        for lvl, res in enumerate(self.level_res):
            scaled = u_host * res
            i0 = np.minimum(scaled.astype(np.int64), res - 1)
            corners = i0[:, None, :] + CORNER_OFFSETS[None, :, :]
            idx = self._hash_indices(corners, res) + lvl * self.table_size
            rows = ad.gather(tables, idx)  # (M, 8, F)
            if u_var is None:
                f = scaled - i0
                w8 = ((np.where(_BX[None], f[:, 0:1], 1.0 - f[:, 0:1]))
                      * (np.where(_BY[None], f[:, 1:2], 1.0 - f[:, 1:2]))
                      * (np.where(_BZ[None], f[:, 2:3], 1.0 - f[:, 2:3])))
                w8 = tape.constant(w8)
            else:
                f = u_var * float(res) - tape.constant(i0.astype(np.float64))
                fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
                wx = ad.concat([1.0 - fx, fx], axis=1)
                wy = ad.concat([1.0 - fy, fy], axis=1)
                wz = ad.concat([1.0 - fz, fz], axis=1)
                sl = slice(None)
                w8 = wx[sl, _BX] * wy[sl, _BY] * wz[sl, _BZ]
            level_feats.append(ad.reduce_sum(rows * w8.reshape(m, 8, 1), axis=1))
        raw = ad.concat(level_feats, axis=1)
        norm = ad.l2norm(raw, axis=1, keepdims=True)
        return raw / ad.maximum(norm, 1e-12)

    def tsdf_prior(self, p_snap_unit):
        """tanh-augmented TSDF readback at snapped points (host-side)."""
        m = p_snap_unit.shape[0]
        if not self.prior_enabled or self.tsdf_grid is None:
            return np.zeros(m)
        world = self.to_world(p_snap_unit)
        raw = self.tsdf_grid.trilinear(world)
        outside = ~np.all((world >= self.tsdf_grid.lo) & (world <= self.tsdf_grid.hi),
                          axis=1)
        self.counters["prior_out_of_volume"] += int(outside.sum())
        return np.tanh(raw) if self.tanh_enabled else raw

    def _prior_on_tape(self, tape, p_snap_unit, delta):
        """(M,1) Var of the prior with gradients to the point that produced
        `delta` (a zero-valued Var with identity jacobian to the unit-cube
        point).  Corner indices freeze at record time, so the result is the
        local affine patch of the trilinear readback: forward values are
        bit-identical to `tsdf_prior`, and the gradient is the interpolation
        gradient — the classic depth-fusion tracking signal.
        """
        grid = self.tsdf_grid
        world = self.to_world(p_snap_unit)
        res = grid.res
        step = (grid.hi - grid.lo) / (res - 1)
        g = (world - grid.lo) / step
        inside = np.all((g >= 0.0) & (g <= res - 1.0), axis=1)
        gc = np.clip(g, 0.0, res - 1.0)
        i0 = np.minimum(gc.astype(np.int64), res - 2)
        f_host = gc - i0
        # d(frac)/d(unit point); zero where the readback clamped
        scale = np.where(inside[:, None], self.extent / step, 0.0)
        f = tape.constant(f_host) + delta * tape.constant(scale)
        fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
        one = tape.constant(np.ones((p_snap_unit.shape[0], 1)))
        wx = (one - fx, fx)
        wy = (one - fy, fy)
        wz = (one - fz, fz)
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        out = tape.constant(np.zeros((p_snap_unit.shape[0], 1)))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    corner = grid.values[ix + dx, iy + dy, iz + dz][:, None]
                    out = out + wx[dx] * wy[dy] * wz[dz] * tape.constant(corner)
        out = (out * tape.constant(inside.astype(np.float64)[:, None])
               + tape.constant(np.where(inside, 0.0, 1.0)[:, None]))
        return ad.tanh(out) if self.tanh_enabled else out

    def assemble(self, tape, points, points_var=None):
        """Build a QueryBatch for (M,3) world points.

        `points` is the host array; pass the matching `points_var` when the
        points came off the tape (pose optimization) so the feature branch
        stays differentiable w.r.t. them.
        """
        p_host = np.asarray(points, dtype=np.float64)
        u_raw = self.normalize_points(p_host)
        u_host = np.clip(u_raw, 0.0, 1.0)
        self.counters["points_clamped"] += int(np.any(u_raw != u_host, axis=1).sum())

        p_snap = snap_coordinate(u_host, self.lattice_res) if self.snap_enabled else u_host
        blob = one_blob_encode(p_snap, self.bins)
        prior = self.tsdf_prior(p_snap)

        u_var = None
        delta = None
        if points_var is not None:
            u_var = (points_var - tape.constant(self.lo)) * (1.0 / self.extent)
            # zero-valued with identity jacobian to the unit-cube point:
            # adding it to a constant gives that exact value plus a pose path
            delta = u_var - ad.stop_gradient(u_var)
        grid_u = p_snap if self.grid_at_snapped else u_host
        grid_var = None if self.grid_at_snapped else u_var
        g = self.hash_features(tape, grid_u, grid_var)

        code_rows, code_idx = None, None
        if self.codebook_enabled:
            codes_host = self.store.value("codebook/codes")
            code_idx = nearest_code(g.value, codes_host)
            self.code_usage += np.bincount(code_idx, minlength=self.n_codes)
            codes_var = tape.param(self.store, "codebook/codes")
            code_rows = ad.gather(codes_var, code_idx)
            feat_slot = g + ad.stop_gradient(code_rows - g)
        else:
            feat_slot = g

        if points_var is None:
            p_slot = tape.constant(p_snap)
            prior_slot = tape.constant(prior[:, None])
        else:
            # straight-through slots: values are the snapped/clamped ones,
            # gradients pass to the raw point so pose optimization sees the
            # one-blob position and the fused-geometry interpolation slope
            p_slot = tape.constant(p_snap) + delta
            if self.prior_enabled and self.tsdf_grid is not None:
                prior_slot = self._prior_on_tape(tape, p_snap, delta)
            else:
                prior_slot = tape.constant(prior[:, None])
        x = ad.concat([p_slot, tape.constant(blob), feat_slot, prior_slot],
                      axis=1)
        return QueryBatch(x, g, code_rows, code_idx, prior, p_snap)
