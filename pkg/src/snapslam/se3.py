"""SE(3) camera poses.

A pose is a 6-vector [wx, wy, wz, tx, ty, tz]: axis-angle rotation (radians)
plus translation (meters), camera-to-world.  Host-side helpers build 4x4
matrices and quaternions (for trajectory files); the tape-side builders
reconstruct the rotation from the parameter block inside the computation
graph so tracking/bundle adjustment can differentiate through it.

Rodrigues is computed as R = I + A·K + B·K² with A = sinθ/θ and
B = (1−cosθ)/θ².  On the tape θ = sqrt(w·w + 1e-30) keeps the zero-rotation
point differentiable (A, B and their derivatives stay finite); host code
branches to the series instead.
"""

import numpy as np

from . import autodiff as ad


def _skew(w):
    wx, wy, wz = w
    return np.array([
        [0.0, -wz, wy],
        [wz, 0.0, -wx],
        [-wy, wx, 0.0],
    ])


def rotation_from_axis_angle(w):
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    K = _skew(w)
    if theta < 1e-12:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def quat_from_rotation(R):
    """Unit quaternion (x, y, z, w), w >= 0. Shepperd's branch-on-trace."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s,
                      0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q):
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_from_quat(q):
    xyz, w = np.asarray(q[:3], dtype=np.float64), float(q[3])
    if w < 0:
        xyz, w = -xyz, -w
    s = np.linalg.norm(xyz)
    if s < 1e-12:
        return 2.0 * xyz  # first-order: q ≈ (w/2, 1)
    return xyz / s * (2.0 * np.arctan2(s, w))


def pose_to_matrix(pose):
    pose = np.asarray(pose, dtype=np.float64)
    M = np.eye(4)
    M[:3, :3] = rotation_from_axis_angle(pose[:3])
    M[:3, 3] = pose[3:]
    return M


def matrix_to_pose(M):
    M = np.asarray(M, dtype=np.float64)
    w = axis_angle_from_quat(quat_from_rotation(M[:3, :3]))
    return np.concatenate([w, M[:3, 3]])


def invert_matrix(M):
    R, t = M[:3, :3], M[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def wrap_rotation(pose):
    """Re-express the axis-angle part with magnitude < π (same rotation).

    Adam can walk the rotation magnitude past π where the parameterization
    gets degenerate; wrapping after each step keeps it in the minimal chart.
    """
    pose = np.asarray(pose, dtype=np.float64).copy()
    theta = np.linalg.norm(pose[:3])
    if theta >= np.pi:
        target = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
        pose[:3] *= target / theta
    return pose


def predict_next(prev, prev2):
    """Constant-speed extrapolation: replay the last relative motion."""
    M1 = pose_to_matrix(prev)
    M0 = pose_to_matrix(prev2)
    return matrix_to_pose(M1 @ (invert_matrix(M0) @ M1))


# --- tape-side builders ----------------------------------------------------

def rotation_on_tape(pose_var):
    """(3,3) rotation Var from the first three entries of a 6-vector pose Var."""
    w = pose_var[0:3]
    zero = w[0:1] * 0.0
    theta2 = ad.reduce_sum(ad.square(w)) + 1e-30
    theta = ad.sqrt(theta2)
    a = ad.sin(theta) / theta
    half = theta * 0.5
    sh = ad.sin(half) / half
    b = sh * sh * 0.5  # (1−cosθ)/θ² via the half-angle identity
    k = ad.concat([
        zero, -w[2:3], w[1:2],
        w[2:3], zero, -w[0:1],
        -w[1:2], w[0:1], zero,
    ]).reshape(3, 3)
    eye = pose_var.tape.constant(np.eye(3))
    return eye + a * k + b * (k @ k)


def points_on_tape(pose_var, dirs_cam, depths):
    """World-space sample points o + d·r for camera-frame unit directions.

    dirs_cam: (M,3) host array; depths: (M,) or (M,1) host array.  Returns an
    (M,3) Var differentiable w.r.t. the pose block.
    """
    tape = pose_var.tape
    R = rotation_on_tape(pose_var)
    dirs = tape.constant(np.asarray(dirs_cam, dtype=np.float64))
    d = np.asarray(depths, dtype=np.float64).reshape(-1, 1)
    world_dirs = dirs @ ad.transpose(R)
    return world_dirs * d + pose_var[3:6]


def dirs_on_tape(pose_var, dirs_cam):
    """World-space ray directions R·r_cam as an (M,3) Var."""
    R = rotation_on_tape(pose_var)
    dirs = pose_var.tape.constant(np.asarray(dirs_cam, dtype=np.float64))
    return dirs @ ad.transpose(R)
