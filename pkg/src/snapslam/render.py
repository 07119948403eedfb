"""Ray generation, depth-guided sampling and normalized alpha blending.

A ray carries unit world direction; "depth" along a ray is the Euclidean
distance from the origin, not the camera-z value stored in depth images.
`camera_dirs` returns the per-pixel conversion factor `dir_z` between the
two (z = d_along * dir_z), and everything downstream sticks to along-ray
distances until images are written back.

Rendering is the simple normalized blend: weights come from a product of
two sigmoids of the signed distance, colors and depths are weight-averaged
with no transmittance accumulation.  Rays whose weight mass is ~zero are
flagged invalid and excluded from losses rather than renormalized, which
avoids spurious gradients early in training.

All batch operations process rays vectorized and reduce in fixed ray-index
order, so results are deterministic for a fixed rng state.
"""

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


def camera_dirs(intrinsics, pixels):
    """Unit camera-frame directions for (K,2) integer (u,v) pixels.

    Returns (dirs (K,3) unit, dir_z (K,)) with dir_z = z component of the
    unit direction, i.e. the along-ray-to-camera-z conversion factor.
    """
    fx, fy, cx, cy = intrinsics
    u = pixels[:, 0].astype(np.float64)
    v = pixels[:, 1].astype(np.float64)
    d = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=1)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    d /= norm
    return d, d[:, 2].copy()


def pixel_grid(width, height):
    """(H*W, 2) integer (u,v) pixel coordinates in row-major order."""
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([u.ravel(), v.ravel()], axis=1)


def generate_rays(pose_c2w, intrinsics, pixels):
    """World-frame rays through the given pixels.

    Returns (origins (K,3), dirs (K,3) unit, dir_z (K,)).
    """
    cam_dirs, dir_z = camera_dirs(intrinsics, pixels)
    R = pose_c2w[:3, :3]
    dirs = cam_dirs @ R.T
    origins = np.broadcast_to(pose_c2w[:3, 3], dirs.shape).copy()
    return origins, dirs, dir_z


def sample_ray(depth, near, far, band, rng, n_stratified=32, n_surface=11):
    """Per-ray sample depths, vectorized over a (K,) batch.

    Rays with valid observed depth (> 0) get `n_stratified` stratified
    samples over [near, far] plus `n_surface` samples in the surface band
    [depth-band, depth+band]; rays without get the full budget stratified.
    With rng=None every draw lands on its stratum midpoint, making the
    sample set a pure function of the inputs.

    Returns (K, n_stratified + n_surface) strictly increasing depths.
    """
    if far <= near:
        raise ConfigError(f"far ({far}) must exceed near ({near})")
    depth = np.asarray(depth, dtype=np.float64)
    k = depth.shape[0]
    n = n_stratified + n_surface
    guided = depth > 0.0

    def strata(rows, count):
        u = (np.full((rows, count), 0.5) if rng is None
             else rng.uniform(size=(rows, count)))
        return near + (far - near) * (np.arange(count) + u) / count

    d = np.empty((k, n))
    d[~guided] = strata(int((~guided).sum()), n)
    ng = int(guided.sum())
    if ng:
        lo = np.maximum(depth[guided, None] - band, 1e-6)
        hi = depth[guided, None] + band
        u = (np.full((ng, n_surface), 0.5) if rng is None
             else rng.uniform(size=(ng, n_surface)))
        surf = lo + (hi - lo) * (np.arange(n_surface) + u) / n_surface
        d[guided] = np.concatenate([strata(ng, n_stratified), surf], axis=1)
    d.sort(axis=1)
    # ties have probability ~0 but would break the strictly-increasing
    # contract; nudge upward by ulps until clean
    while True:
        flat = d[:, 1:] <= d[:, :-1]
        if not flat.any():
            break
        d[:, 1:][flat] = np.nextafter(d[:, :-1][flat], np.inf)
        d.sort(axis=1)
    return d


def sdf_to_weight(s, t):
    """Blending weight sigmoid(s/t) * sigmoid(-s/t); peak 0.25 at s = 0.

    Accepts a plain array or a tape Var.
    """
    if t <= 0:
        raise ConfigError(f"rendering truncation must be positive, got {t}")
    if isinstance(s, ad.Var):
        a = s * (1.0 / t)
        return ad.sigmoid(a) * ad.sigmoid(-a)
    # even in s, so compute from |s|: exp(-a)/(1+exp(-a))^2 never rounds to
    # zero the way sigmoid(a)*(1-sigmoid(a)) does once sigmoid(a) hits 1.0
    a = np.minimum(np.abs(np.asarray(s, dtype=np.float64)) / t, 700.0)
    e = np.exp(-a)
    return e / ((1.0 + e) * (1.0 + e))


WEIGHT_FLOOR = 1e-10


def render_rays(d, w, c):
    """Normalized blend of (K,N) sample depths/weights and (K,N,3) colors.

    Returns (rgb (K,3), depth (K,), valid (K,)); rows with weight mass
    below WEIGHT_FLOOR are flagged invalid and left as zeros.
    """
    wsum = w.sum(axis=1)
    valid = wsum >= WEIGHT_FLOOR
    rgb = np.zeros((d.shape[0], 3))
    depth = np.zeros(d.shape[0])
    if valid.any():
        ws = wsum[valid][:, None]
        rgb[valid] = (w[valid, :, None] * c[valid]).sum(axis=1) / ws
        depth[valid] = (w[valid] * d[valid]).sum(axis=1) / ws[:, 0]
    return rgb, depth, valid


def render_rays_on_tape(tape, d, w, c):
    """Tape-side blend for training.

    d: (K,N) host sample depths; w: (K,N) Var weights; c: (K,N*3) Var
    colors (channel-flattened so row gathers stay two-dimensional).
    Invalid rays are dropped *before* the division so no gradient flows
    through a degenerate normalizer.

    Returns (rgb Var (V,3), depth Var (V,), valid (K,) bool).
    """
    k, n = d.shape
    wsum_all = w.sum(axis=1)
    valid = wsum_all.value >= WEIGHT_FLOOR
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return None, None, valid
    wv = ad.gather(w, idx)
    cv = ad.gather(c, idx).reshape((idx.size, n, 3))
    dv = tape.constant(d[idx])
    wsum = wv.sum(axis=1, keepdims=True)
    rgb = (wv.reshape((idx.size, n, 1)) * cv).sum(axis=1) / wsum
    depth = (wv * dv).sum(axis=1) / wsum.reshape((idx.size,))
    return rgb, depth, valid


def render_image(sdf_at, color_at, pose_c2w, intrinsics, width, height,
                 near, far, t_render, band, n_stratified=32, n_surface=11,
                 depth_guide=None, rng=None, chunk=4096):
    """Full-frame render-out for evaluation and debug dumps.

    sdf_at / color_at: callables mapping (M,3) world points to (M,) signed
    distances and (M,3) colors (color_at may be None).  depth_guide: (H,W)
    z-depth image used for surface-band sampling where valid.

    Returns (rgb (H,W,3), zdepth (H,W), valid (H,W)); invalid pixels hold 0.
    """
    pixels = pixel_grid(width, height)
    rgb_out = np.zeros((height * width, 3))
    z_out = np.zeros(height * width)
    valid_out = np.zeros(height * width, dtype=bool)
    for start in range(0, pixels.shape[0], chunk):
        px = pixels[start:start + chunk]
        origins, dirs, dir_z = generate_rays(pose_c2w, intrinsics, px)
        if depth_guide is None:
            d_along = np.zeros(px.shape[0])
        else:
            z = depth_guide[px[:, 1], px[:, 0]]
            d_along = np.where(z > 0, z / dir_z, 0.0)
        d = sample_ray(d_along, near, far, band, rng,
                       n_stratified=n_stratified, n_surface=n_surface)
        pts = origins[:, None, :] + d[:, :, None] * dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        s = np.asarray(sdf_at(flat)).reshape(d.shape)
        w = sdf_to_weight(s, t_render)
        if color_at is None:
            c = np.zeros(d.shape + (3,))
        else:
            c = np.asarray(color_at(flat)).reshape(d.shape + (3,))
        rgb, depth, valid = render_rays(d, w, c)
        sl = slice(start, start + px.shape[0])
        rgb_out[sl] = rgb
        z_out[sl] = depth * dir_z * valid
        valid_out[sl] = valid
    return (rgb_out.reshape(height, width, 3),
            z_out.reshape(height, width),
            valid_out.reshape(height, width))
