"""Trajectory and reconstruction metrics.

ATE RMSE after closed-form rigid alignment, masked depth L1, and sampled
mesh accuracy / completion — everything reported in centimeters so the
numbers read naturally at desk scale.  All sampling is seeded and every
function is a pure read of its inputs.
"""

import json

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .errors import EvaluationError

MESH_SAMPLES = 100_000
COMP_THRESHOLD_M = 0.05  # "completion ratio < 5cm" threshold


# --- trajectory ---------------------------------------------------------------


def _translations(poses):
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim == 3:  # (N,4,4) transforms
        return poses[:, :3, 3]
    return poses.reshape(-1, 3)


def align_rigid(est, gt, with_scale=False):
    """Closed-form (Horn/Umeyama) fit of s·R·est + t ≈ gt, scale fixed to 1 by default.

    Returns (s, R, t) minimizing the summed squared residuals.
    """
    est, gt = _translations(est), _translations(gt)
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    ec, gc = est - mu_e, gt - mu_g
    cov = gc.T @ ec / len(est)
    u, sv, vt = np.linalg.svd(cov)
    d = np.eye(3)
    d[2, 2] = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    rot = u @ d @ vt
    if with_scale:
        var_e = (ec * ec).sum() / len(est)
        scale = np.trace(np.diag(sv) @ d) / var_e
    else:
        scale = 1.0
    return scale, rot, mu_g - scale * rot @ mu_e


def ate_rmse(est, gt, with_scale=False):
    """RMSE of aligned translation residuals, in cm.  Needs >= 2 matched poses."""
    est, gt = _translations(est), _translations(gt)
    if len(est) != len(gt):
        raise EvaluationError(
            f"trajectory lengths differ: {len(est)} estimated vs {len(gt)} ground truth")
    if len(est) < 2:
        raise EvaluationError(f"need at least 2 poses to evaluate, got {len(est)}")
    s, rot, t = align_rigid(est, gt, with_scale=with_scale)
    resid = (s * (rot @ est.T).T + t) - gt
    return float(np.sqrt((resid * resid).sum(axis=1).mean()) * 100.0)


def read_trajectory(path):
    """TUM trajectory file -> (timestamps (N,), poses (N,4,4) c2w)."""
    stamps, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise EvaluationError(f"{path}: expected 8 values per line, got {len(vals)}")
            stamps.append(vals[0])
            m = np.eye(4)
            m[:3, :3] = se3.rotation_from_quat(np.array(vals[4:8]))
            m[:3, 3] = vals[1:4]
            poses.append(m)
    if not stamps:
        raise EvaluationError(f"{path}: no poses")
    return np.array(stamps), np.array(poses)


def write_trajectory(path, stamps, poses):
    with open(path, "w") as f:
        for ts, pose in zip(stamps, poses):
            q = se3.quat_from_rotation(pose[:3, :3])
            tx, ty, tz = pose[:3, 3]
            f.write("%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                    % (ts, tx, ty, tz, q[0], q[1], q[2], q[3]))


def match_trajectories(est_stamps, est_poses, gt_stamps, gt_poses, tolerance=0.02):
    """Pair each estimated pose with the nearest-in-time GT pose within tolerance."""
    gt_stamps = np.asarray(gt_stamps, dtype=np.float64)
    order = np.argsort(gt_stamps)
    gt_sorted = gt_stamps[order]
    pairs_e, pairs_g = [], []
    for i, ts in enumerate(np.asarray(est_stamps, dtype=np.float64)):
        j = np.searchsorted(gt_sorted, ts)
        best, best_dt = -1, tolerance
        for cand in (j - 1, j):
            if 0 <= cand < len(gt_sorted) and abs(gt_sorted[cand] - ts) <= best_dt:
                best, best_dt = cand, abs(gt_sorted[cand] - ts)
        if best >= 0:
            pairs_e.append(i)
            pairs_g.append(order[best])
    if len(pairs_e) < 2:
        raise EvaluationError(
            f"only {len(pairs_e)} timestamp matches within {tolerance}s; need >= 2")
    return np.asarray(est_poses)[pairs_e], np.asarray(gt_poses)[pairs_g]


# --- depth --------------------------------------------------------------------


def depth_l1(pred, gt):
    """Mean |pred - gt| over pixels with gt > 0, in cm."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    mask = gt > 0
    if not mask.any():
        raise EvaluationError("no valid ground-truth depth pixels")
    return float(np.abs(pred[mask] - gt[mask]).mean() * 100.0)


# --- mesh accuracy / completion -------------------------------------------------


def sample_mesh(mesh, n, rng):
    """n points drawn uniformly by area over the mesh surface."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if mesh.n_triangles() == 0 or total <= 0:
        raise EvaluationError("cannot sample an empty mesh")
    tri = rng.choice(mesh.n_triangles(), size=n, p=areas / total)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    fold = u + v > 1.0
    u[fold], v[fold] = 1.0 - u[fold], 1.0 - v[fold]
    c = mesh.vertices[mesh.triangles[tri]]
    return c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])


def _point_triangle_distance(p, a, b, c):
    """Exact closest distance from each p[i] to triangle (a[i], b[i], c[i])."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.clip(d1 / (d1 - d3), 0.0, 1.0)
        t_ac = np.clip(d2 / (d2 - d6), 0.0, 1.0)
        t_bc = np.clip((d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0, 1.0)
        denom = va + vb + vc
        w_b = vb / denom
        w_c = vc / denom

    closest = a + w_b[:, None] * ab + w_c[:, None] * ac          # face region
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(on_bc[:, None], b + t_bc[:, None] * (c - b), closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[:, None], a + t_ac[:, None] * ac, closest)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[:, None], a + t_ab[:, None] * ab, closest)
    at_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(at_c[:, None], c, closest)
    at_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(at_b[:, None], b, closest)
    at_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(at_a[:, None], a, closest)

    d = np.linalg.norm(p - closest, axis=1)
    # degenerate triangle fallback: nearest corner
    bad = ~np.isfinite(d)
    if bad.any():
        d[bad] = np.minimum.reduce([np.linalg.norm(p[bad] - q[bad], axis=1)
                                    for q in (a, b, c)])
    return d


def nearest_distance(points, mesh, chunk=20000):
    """Exact distance from each point to the mesh surface.

    A centroid KD-tree gives an upper bound; every triangle whose centroid
    lies within bound + max circumradius is then checked exactly, so the
    shortlist provably contains the true nearest triangle.
    """
    if mesh.n_triangles() == 0:
        raise EvaluationError("cannot measure distance to an empty mesh")
    corners = mesh.triangle_corners()
    centroids = corners.mean(axis=1)
    radius = np.linalg.norm(corners - centroids[:, None, :], axis=2).max()
    tree = cKDTree(centroids)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        _, j = tree.query(p)
        upper = _point_triangle_distance(
            p, corners[j, 0], corners[j, 1], corners[j, 2])
        cand = tree.query_ball_point(p, upper + radius + 1e-12)
        lens = np.array([len(c) for c in cand])
        qi = np.repeat(np.arange(len(p)), lens)
        ti = np.concatenate(cand).astype(np.int64)
        d = _point_triangle_distance(
            p[qi], corners[ti, 0], corners[ti, 1], corners[ti, 2])
        bounds = np.concatenate([[0], np.cumsum(lens)[:-1]])
        out[s:s + chunk] = np.minimum.reduceat(d, bounds)
    return out


def mesh_metrics(recon, gt, samples=MESH_SAMPLES, threshold=COMP_THRESHOLD_M, seed=0):
    """(accuracy cm, completion cm, completion ratio %) via area-uniform sampling.

    Both meshes are sampled with the same seed so swapping the arguments
    swaps accuracy and completion exactly.
    """
    pts_recon = sample_mesh(recon, samples, np.random.default_rng(seed))
    pts_gt = sample_mesh(gt, samples, np.random.default_rng(seed))
    d_recon = nearest_distance(pts_recon, gt)
    d_gt = nearest_distance(pts_gt, recon)
    return (float(d_recon.mean() * 100.0),
            float(d_gt.mean() * 100.0),
            float((d_gt < threshold).mean() * 100.0))


# --- report -------------------------------------------------------------------


def write_report(path, report):
    """Evaluation JSON with stable key order (byte-identical for equal inputs)."""
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report
