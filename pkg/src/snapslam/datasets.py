"""RGBD sequence ingestion and the synthetic ground-truth generator.

Sequences live on disk in the TUM RGB-D layout::

    rgb/*.png  depth/*.png  rgb.txt  depth.txt  groundtruth.txt  intrinsics.txt

rgb.txt / depth.txt list "timestamp filename" pairs; groundtruth.txt lines
are "timestamp tx ty tz qx qy qz qw" (camera-to-world, w-last quaternions);
depth PNGs are 16-bit with value/5000 = meters, 0 = invalid.  The
intrinsics.txt file ("fx fy cx cy" on one line) is our addition — the
benchmark distributes intrinsics out of band, so sequences without the
file fall back to the benchmark's default camera.

The synthetic side builds scenes from exact analytic primitives (sphere,
axis-aligned box, half-space plane; union by min), so every generated
frame comes with an SDF oracle that is exact to machine precision.  Depth
is produced by sphere tracing and stored pre-quantized to the 16-bit TUM
grid, which keeps in-memory frames bit-identical with a disk round trip.

World convention: y is up; cameras are OpenCV-style (x right, y down,
z forward), poses camera-to-world.
"""

import os
import re
from importlib import resources

import numpy as np
from PIL import Image

from .errors import DataError
from .render import camera_dirs, pixel_grid
from .se3 import quat_from_rotation, rotation_from_quat

DEPTH_SCALE = 5000.0
ASSOCIATION_TOLERANCE = 0.02
DEFAULT_INTRINSICS = (525.0, 525.0, 319.5, 239.5)
FRAME_RATE = 30.0


class Frame:
    __slots__ = ("rgb", "depth", "timestamp", "intrinsics", "gt_pose")

    def __init__(self, rgb, depth, timestamp, intrinsics, gt_pose=None):
        self.rgb = rgb              # (H,W,3) float64 in [0,1]
        self.depth = depth          # (H,W) float64 meters, 0 = invalid
        self.timestamp = timestamp
        self.intrinsics = tuple(float(v) for v in intrinsics)
        self.gt_pose = gt_pose      # (4,4) camera-to-world or None

    @property
    def size(self):
        return self.depth.shape[1], self.depth.shape[0]  # (W, H)


# --- analytic primitives ----------------------------------------------------

def sphere_sdf(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def plane_sdf(p, point, normal):
    return (p - point) @ normal


class Scene:
    """Union of analytic primitives with per-primitive albedo.

    Primitives: ("sphere", center, radius, albedo),
    ("box", center, half_extents, albedo), ("plane", point, unit_normal,
    albedo).  The scene SDF is the pointwise min; color at a point is the
    albedo of the nearest primitive.
    """

    def __init__(self, bounds_lo, bounds_hi, primitives):
        self.bounds_lo = np.asarray(bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(bounds_hi, dtype=np.float64)
        if not np.all(self.bounds_hi > self.bounds_lo):
            raise DataError("scene bounds must have positive extent")
        if not primitives:
            raise DataError("scene has no primitives")
        self.primitives = primitives

    def _per_primitive(self, p):
        p = np.asarray(p, dtype=np.float64)
        out = np.empty((len(self.primitives),) + p.shape[:-1])
        for i, prim in enumerate(self.primitives):
            kind = prim[0]
            if kind == "sphere":
                out[i] = sphere_sdf(p, prim[1], prim[2])
            elif kind == "box":
                out[i] = box_sdf(p, prim[1], prim[2])
            else:
                out[i] = plane_sdf(p, prim[1], prim[2])
        return out

    def sdf(self, p):
        return self._per_primitive(p).min(axis=0)

    def color(self, p):
        which = np.argmin(self._per_primitive(p), axis=0)
        albedos = np.stack([np.asarray(prim[3]) for prim in self.primitives])
        return albedos[which]

    def diagonal(self):
        return float(np.linalg.norm(self.bounds_hi - self.bounds_lo))

    def center(self):
        return (self.bounds_lo + self.bounds_hi) / 2.0

    # --- text format ------------------------------------------------------

    @classmethod
    def from_text(cls, text):
        lo = hi = None
        prims = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind, vals = parts[0], [float(v) for v in parts[1:]]
            try:
                if kind == "bounds":
                    lo, hi = np.array(vals[:3]), np.array(vals[3:6])
                elif kind == "sphere":
                    prims.append(("sphere", np.array(vals[:3]), vals[3],
                                  np.array(vals[4:7])))
                elif kind == "box":
                    prims.append(("box", np.array(vals[:3]), np.array(vals[3:6]),
                                  np.array(vals[6:9])))
                elif kind == "plane":
                    n = np.array(vals[3:6])
                    n = n / np.linalg.norm(n)
                    prims.append(("plane", np.array(vals[:3]), n,
                                  np.array(vals[6:9])))
                else:
                    raise DataError(f"scene line {lineno}: unknown entry '{kind}'")
            except (IndexError, ValueError) as e:
                raise DataError(f"scene line {lineno}: malformed '{raw}'") from e
        if lo is None:
            raise DataError("scene file has no bounds line")
        return cls(lo, hi, prims)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_text(f.read())
        except OSError as e:
            raise DataError(f"cannot read scene file '{path}': {e}") from e

    def to_text(self):
        lines = ["bounds " + " ".join(f"{v:.6g}" for v in
                                      np.concatenate([self.bounds_lo, self.bounds_hi]))]
        for prim in self.primitives:
            kind = prim[0]
            if kind == "sphere":
                vals = list(prim[1]) + [prim[2]] + list(prim[3])
            else:
                vals = list(prim[1]) + list(prim[2]) + list(prim[3])
            lines.append(kind + " " + " ".join(f"{float(v):.6g}" for v in vals))
        return "\n".join(lines) + "\n"


STOCK_SCENE_NAMES = ("sphere_room", "box_corner")


def stock_scene(name):
    """One of the scenes shipped with the package, by name."""
    if name not in STOCK_SCENE_NAMES:
        raise DataError(f"unknown scene '{name}' (have: {sorted(STOCK_SCENE_NAMES)})")
    text = (resources.files("snapslam") / "scenes" / f"{name}.scene").read_text()
    return Scene.from_text(text)


# --- trajectories -----------------------------------------------------------

def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world matrix for a y-down camera at `eye` facing `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(x)
    if n < 1e-12:  # looking straight along `up`
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / n
    y = np.cross(z, x)
    M = np.eye(4)
    M[:3, 0], M[:3, 1], M[:3, 2], M[:3, 3] = x, y, z, eye
    return M


def orbit_trajectory(scene, frames):
    """Full circle inside the scene, camera looking at the center region.

    The sweep is eased (smoothstep) so the rig starts and ends at rest: a
    frame's motion then differs only slightly from the previous frame's,
    which a constant-speed pose predictor can follow everywhere.
    """
    c = scene.center()
    ext = scene.bounds_hi - scene.bounds_lo
    radius = 0.35 * min(ext[0], ext[2])
    eye_y = c[1] + 0.15 * ext[1]
    target = c + np.array([0.0, -0.15 * ext[1], 0.0])
    poses = []
    span = 2.0 * np.pi * (frames - 1) / frames
    for i in range(frames):
        u = i / (frames - 1)
        phi = span * u * u * (3.0 - 2.0 * u)
        eye = c + np.array([radius * np.cos(phi), 0.0, radius * np.sin(phi)])
        eye[1] = eye_y
        poses.append(look_at(eye, target))
    return np.stack(poses)


def lateral_trajectory(scene, frames):
    """Straight sideways slide at constant velocity, fixed look target."""
    c = scene.center()
    ext = scene.bounds_hi - scene.bounds_lo
    start = c + np.array([-0.30 * ext[0], 0.30 * ext[1], 0.42 * ext[2]])
    end = start + np.array([0.60 * ext[0], 0.0, 0.0])
    target = c + np.array([0.0, -0.30 * ext[1], -0.20 * ext[2]])
    poses = []
    for i in range(frames):
        a = i / max(frames - 1, 1)
        poses.append(look_at(start + a * (end - start), target))
    return np.stack(poses)


def stock_trajectory(name, scene):
    """Named trajectories: orbit<N> or lateral<N> (e.g. orbit50, lateral30)."""
    m = re.fullmatch(r"(orbit|lateral)(\d+)", name)
    if not m:
        raise DataError(f"unknown trajectory '{name}' (expected orbitN/lateralN)")
    frames = int(m.group(2))
    if frames < 2:
        raise DataError("trajectory needs at least 2 frames")
    fn = orbit_trajectory if m.group(1) == "orbit" else lateral_trajectory
    return fn(scene, frames)


# --- synthetic generation ---------------------------------------------------

def sphere_trace(scene, origins, dirs, max_depth, steps=64, tol=1e-6):
    """March each ray to the scene surface.

    Returns (t, hit): along-ray hit distances (K,) and a bool mask; rays
    that never reach |sdf| < tol within max_depth are misses.
    """
    k = origins.shape[0]
    t = np.zeros(k)
    hit = np.zeros(k, dtype=bool)
    active = np.ones(k, dtype=bool)
    for _ in range(steps):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        s = scene.sdf(p)
        arrived = s < tol
        idx = np.nonzero(active)[0]
        hit[idx[arrived]] = True
        t[idx] += np.where(arrived, 0.0, s)
        overrun = t[idx] > max_depth
        active[idx[arrived | overrun]] = False
    return t, hit


def generate_synthetic(scene, poses, width, height, intrinsics,
                       noise_sigma=0.0, rng=None, quantize=True):
    """Render exact RGBD frames for the given camera-to-world poses.

    Depth is sphere-traced, converted to camera z, optionally perturbed by
    Gaussian noise, and (by default) quantized to the 16-bit TUM depth
    grid so that writing + reloading reproduces these frames bit for bit.
    quantize=False keeps the tracer-exact depth (surface residual < 1e-6)
    for geometric consistency checks, at the cost of that bit-identity.
    """
    px = pixel_grid(width, height)
    cam_dirs, dir_z = camera_dirs(intrinsics, px)
    max_depth = 2.0 * scene.diagonal()
    frames = []
    for i, pose in enumerate(poses):
        R = pose[:3, :3]
        dirs = cam_dirs @ R.T
        origins = np.broadcast_to(pose[:3, 3], dirs.shape)
        t, hit = sphere_trace(scene, origins, dirs, max_depth)
        z = np.where(hit, t * dir_z, 0.0)
        if noise_sigma > 0:
            if rng is None:
                rng = np.random.default_rng(0)
            z = np.where(hit, z + rng.normal(0.0, noise_sigma, z.shape), 0.0)
        if quantize:
            z = np.maximum(np.round(z * DEPTH_SCALE), 0.0) / DEPTH_SCALE
            z[z > 65535 / DEPTH_SCALE] = 0.0

        color = np.zeros((width * height, 3))
        if hit.any():
            p_hit = origins[hit] + t[hit, None] * dirs[hit]
            color[hit] = scene.color(p_hit)
        color = np.round(color * 255.0) / 255.0  # match 8-bit storage

        # timestamps snap to whole microseconds so the %.6f listing format
        # reparses to the identical float
        frames.append(Frame(color.reshape(height, width, 3),
                            z.reshape(height, width),
                            timestamp=round(i / FRAME_RATE, 6),
                            intrinsics=intrinsics,
                            gt_pose=pose.copy()))
    return frames


# --- TUM layout IO ----------------------------------------------------------

def write_tum(frames, directory, scene=None):
    """Write frames (and optionally the generating scene) in TUM layout."""
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    rgb_lines, depth_lines, gt_lines = [], [], []
    for fr in frames:
        name = f"{fr.timestamp:.6f}.png"
        Image.fromarray(np.round(fr.rgb * 255.0).astype(np.uint8)).save(
            os.path.join(directory, "rgb", name))
        Image.fromarray(np.round(fr.depth * DEPTH_SCALE).astype(np.uint16)).save(
            os.path.join(directory, "depth", name))
        rgb_lines.append(f"{fr.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{fr.timestamp:.6f} depth/{name}")
        if fr.gt_pose is not None:
            q = quat_from_rotation(fr.gt_pose[:3, :3])
            tr = fr.gt_pose[:3, 3]
            gt_lines.append(f"{fr.timestamp:.6f} "
                            + " ".join(f"{v:.9f}" for v in tr)
                            + " " + " ".join(f"{v:.9f}" for v in q))
    with open(os.path.join(directory, "rgb.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    if gt_lines:
        with open(os.path.join(directory, "groundtruth.txt"), "w") as f:
            f.write("# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n")
    with open(os.path.join(directory, "intrinsics.txt"), "w") as f:
        f.write(" ".join(f"{v:.6f}" for v in frames[0].intrinsics) + "\n")
    if scene is not None:
        with open(os.path.join(directory, "scene.scene"), "w") as f:
            f.write(scene.to_text())


def _read_list(path):
    entries = []
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            entries.append((float(parts[0]), parts[1]))
    entries.sort(key=lambda e: e[0])
    return entries


def _nearest(sorted_ts, t):
    """Index of the value in sorted_ts closest to t."""
    i = np.searchsorted(sorted_ts, t)
    best, dist = None, np.inf
    for j in (i - 1, i):
        if 0 <= j < len(sorted_ts) and abs(sorted_ts[j] - t) < dist:
            best, dist = j, abs(sorted_ts[j] - t)
    return best, dist


def load_tum(directory, tolerance=ASSOCIATION_TOLERANCE):
    """Load a TUM-layout sequence.

    Associates each rgb frame with the nearest depth frame (and GT pose,
    when groundtruth.txt exists) within `tolerance` seconds; unmatched rgb
    frames are dropped.  Returns (frames, dropped_count).
    """
    rgb_list_path = os.path.join(directory, "rgb.txt")
    depth_list_path = os.path.join(directory, "depth.txt")
    for p in (rgb_list_path, depth_list_path):
        if not os.path.isfile(p):
            raise DataError(f"missing sequence file: {p}")
    rgb_entries = _read_list(rgb_list_path)
    depth_entries = _read_list(depth_list_path)
    if not rgb_entries or not depth_entries:
        raise DataError(f"empty sequence in {directory}")
    depth_ts = np.array([t for t, _ in depth_entries])

    gt_path = os.path.join(directory, "groundtruth.txt")
    gt_ts, gt_poses = None, None
    if os.path.isfile(gt_path):
        rows = []
        with open(gt_path) as f:
            for raw in f:
                line = raw.split("#", 1)[0].strip()
                if line:
                    rows.append([float(v) for v in line.split()])
        rows.sort(key=lambda r: r[0])
        gt_ts = np.array([r[0] for r in rows])
        gt_poses = []
        for r in rows:
            M = np.eye(4)
            M[:3, :3] = rotation_from_quat(r[4:8])
            M[:3, 3] = r[1:4]
            gt_poses.append(M)

    intr = DEFAULT_INTRINSICS
    intr_path = os.path.join(directory, "intrinsics.txt")
    if os.path.isfile(intr_path):
        with open(intr_path) as f:
            intr = tuple(float(v) for v in f.read().split()[:4])

    frames, dropped = [], 0
    for t_rgb, rgb_name in rgb_entries:
        j, dist = _nearest(depth_ts, t_rgb)
        if j is None or dist > tolerance:
            dropped += 1
            continue
        rgb = np.asarray(Image.open(os.path.join(directory, rgb_name)),
                         dtype=np.float64) / 255.0
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[:, :, None], 3, axis=2)
        rgb = rgb[:, :, :3]
        depth_raw = np.asarray(Image.open(
            os.path.join(directory, depth_entries[j][1])))
        depth = depth_raw.astype(np.float64) / DEPTH_SCALE
        pose = None
        if gt_ts is not None:
            gj, gdist = _nearest(gt_ts, t_rgb)
            if gj is not None and gdist <= tolerance:
                pose = gt_poses[gj]
        frames.append(Frame(rgb, depth, t_rgb, intr, gt_pose=pose))
    if not frames:
        raise DataError(f"no associable frames in {directory}")
    return frames, dropped
