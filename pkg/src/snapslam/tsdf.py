"""Dense TSDF fusion at 256³ with weighted averaging and full re-fusion.

The grid stores truncated signed distances normalized to [-1, 1] by the
truncation distance (10 voxel widths by default) plus a fusion weight per
voxel.  Unobserved voxels are (+1, 0): "free until seen", which doubles as
the out-of-bounds answer for readback.

Values live at lattice nodes: node i sits at lo + i * voxel_size with
voxel_size = side / (resolution - 1).  Bounds are expanded to a centered
cube of the longest extent at construction so voxel_size is isotropic and
"truncation = N voxel widths" is unambiguous; readback between the original
box and the cube is real fused data, not padding.

integrate_frame is voxel-centric: every node projects into the frame, reads
the nearest depth pixel, and blends clamp((D - z) / trunc) if it lies in
front of the surface or within the truncation band behind it.  The hot loop
is a numba kernel; `integrate_frame_reference` is the pure-numpy version the
tests diff against (keep both — the kernel is only trusted because the slow
twin checks it).
"""

import numpy as np
from numba import njit

from . import se3
from .errors import ConfigError


class TsdfGrid:
    def __init__(self, lo, hi, resolution=256, truncation_voxels=10, weight_cap=128.0):
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if not np.all(hi > lo):
            raise ConfigError("TSDF bounds must satisfy hi > lo per axis")
        # expand to a centered cube: isotropic voxels, scalar truncation
        side = float(np.max(hi - lo))
        center = 0.5 * (lo + hi)
        self.lo = center - 0.5 * side
        self.hi = center + 0.5 * side
        self.res = int(resolution)
        self.voxel_size = side / (self.res - 1)
        self.truncation = truncation_voxels * self.voxel_size
        self.weight_cap = float(weight_cap)
        self.values = np.ones((self.res,) * 3, dtype=np.float64)
        self.weights = np.zeros((self.res,) * 3, dtype=np.float64)
        self.frames_fused = 0

    def copy(self):
        out = TsdfGrid.__new__(TsdfGrid)
        out.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in self.__dict__.items()})
        return out

    def integrate_frame(self, depth, c2w_pose, intrinsics):
        """Fuse one depth image (meters, 0 = invalid) taken from `c2w_pose`
        (6-vector or 4x4 matrix) with pinhole `intrinsics` (fx, fy, cx, cy)."""
        M = c2w_pose if np.shape(c2w_pose) == (4, 4) else se3.pose_to_matrix(c2w_pose)
        w2c = se3.invert_matrix(M)
        fx, fy, cx, cy = (float(v) for v in intrinsics)
        _integrate_kernel(
            self.values, self.weights,
            np.ascontiguousarray(depth, dtype=np.float64),
            np.ascontiguousarray(w2c, dtype=np.float64),
            fx, fy, cx, cy,
            self.lo, self.voxel_size, self.truncation, self.weight_cap)
        self.frames_fused += 1

    def integrate_frame_reference(self, depth, c2w_pose, intrinsics):
        """Chunked-numpy twin of integrate_frame (test oracle)."""
        M = c2w_pose if np.shape(c2w_pose) == (4, 4) else se3.pose_to_matrix(c2w_pose)
        w2c = se3.invert_matrix(M)
        fx, fy, cx, cy = (float(v) for v in intrinsics)
        H, W = depth.shape
        n = self.res
        idx = np.arange(n, dtype=np.float64)
        coords = self.lo[None, :] + self.voxel_size * np.stack(
            np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1).reshape(-1, 3)
        cam = coords @ w2c[:3, :3].T + w2c[:3, 3]
        z = cam[:, 2]
        u = np.rint(fx * cam[:, 0] / np.where(z > 0, z, 1.0) + cx).astype(np.int64)
        v = np.rint(fy * cam[:, 1] / np.where(z > 0, z, 1.0) + cy).astype(np.int64)
        ok = (z > 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        d_obs = np.zeros(len(coords))
        d_obs[ok] = depth[v[ok], u[ok]]
        ok &= d_obs > 0
        sdf_raw = d_obs - z
        ok &= sdf_raw > -self.truncation
        tsdf = np.clip(sdf_raw / self.truncation, -1.0, 1.0)
        vals = self.values.reshape(-1)
        wts = self.weights.reshape(-1)
        old_w = wts[ok]
        vals[ok] = (vals[ok] * old_w + tsdf[ok]) / (old_w + 1.0)
        wts[ok] = np.minimum(old_w + 1.0, self.weight_cap)
        self.frames_fused += 1

    def trilinear(self, points):
        """Interpolated TSDF at world points (M,3); +1 outside the volume."""
        return trilinear_read(self.values, self.lo, self.hi, points)

    def save(self, path):
        """Flat binary dump: int32 dims[3], float32 bounds[6] + truncation,
        then interleaved (value, weight) float32 pairs in C order.
        Little-endian throughout."""
        with open(path, "wb") as f:
            np.asarray([self.res] * 3, dtype="<i4").tofile(f)
            header = np.concatenate([self.lo, self.hi, [self.truncation]])
            header.astype("<f4").tofile(f)
            inter = np.empty((self.values.size, 2), dtype="<f4")
            inter[:, 0] = self.values.reshape(-1)
            inter[:, 1] = self.weights.reshape(-1)
            inter.tofile(f)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            dims = np.fromfile(f, dtype="<i4", count=3)
            head = np.fromfile(f, dtype="<f4", count=7)
            body = np.fromfile(f, dtype="<f4").reshape(-1, 2)
        res = int(dims[0])
        grid = cls(head[0:3], head[3:6], resolution=res,
                   truncation_voxels=1, weight_cap=128.0)
        grid.truncation = float(head[6])
        grid.values = body[:, 0].astype(np.float64).reshape((res,) * 3)
        grid.weights = body[:, 1].astype(np.float64).reshape((res,) * 3)
        return grid


def refuse(depths, poses, intrinsics, lo, hi, resolution=256,
           truncation_voxels=10, weight_cap=128.0):
    """Rebuild the grid from scratch with current pose estimates."""
    grid = TsdfGrid(lo, hi, resolution, truncation_voxels, weight_cap)
    for depth, pose in zip(depths, poses):
        grid.integrate_frame(depth, pose, intrinsics)
    return grid


def trilinear_read(values, lo, hi, points):
    """8-corner interpolation of a node lattice; +1 where out of bounds."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    res = values.shape[0]
    step = (np.asarray(hi) - np.asarray(lo)) / (res - 1)
    g = (points - lo) / step
    inside = np.all((g >= 0.0) & (g <= res - 1.0), axis=1)
    gc = np.clip(g, 0.0, res - 1.0)
    i0 = np.minimum(gc.astype(np.int64), res - 2)
    f = gc - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    out = np.zeros(len(points))
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                out += wx * wy * wz * values[ix + dx, iy + dy, iz + dz]
    out[~inside] = 1.0
    return out


@njit(cache=True)
def _integrate_kernel(values, weights, depth, w2c, fx, fy, cx, cy,
                      lo, voxel_size, trunc, weight_cap):
    res = values.shape[0]
    H, W = depth.shape
    r00, r01, r02, t0 = w2c[0, 0], w2c[0, 1], w2c[0, 2], w2c[0, 3]
    r10, r11, r12, t1 = w2c[1, 0], w2c[1, 1], w2c[1, 2], w2c[1, 3]
    r20, r21, r22, t2 = w2c[2, 0], w2c[2, 1], w2c[2, 2], w2c[2, 3]
    for i in range(res):
        x = lo[0] + i * voxel_size
        for j in range(res):
            y = lo[1] + j * voxel_size
            # hoist the x/y part of the rotation out of the inner loop
            cx0 = r00 * x + r01 * y + t0
            cy0 = r10 * x + r11 * y + t1
            cz0 = r20 * x + r21 * y + t2
            for k in range(res):
                z = lo[2] + k * voxel_size
                camz = cz0 + r22 * z
                if camz <= 0.0:
                    continue
                camx = cx0 + r02 * z
                camy = cy0 + r12 * z
                u = int(np.rint(fx * camx / camz + cx))
                v = int(np.rint(fy * camy / camz + cy))
                if u < 0 or u >= W or v < 0 or v >= H:
                    continue
                d_obs = depth[v, u]
                if d_obs <= 0.0:
                    continue
                sdf_raw = d_obs - camz
                if sdf_raw <= -trunc:
                    continue
                tsdf = sdf_raw / trunc
                if tsdf > 1.0:
                    tsdf = 1.0
                elif tsdf < -1.0:
                    tsdf = -1.0
                old_w = weights[i, j, k]
                values[i, j, k] = (values[i, j, k] * old_w + tsdf) / (old_w + 1.0)
                new_w = old_w + 1.0
                if new_w > weight_cap:
                    new_w = weight_cap
                weights[i, j, k] = new_w
