"""Zero-level-set extraction (marching cubes) and triangle-mesh I/O.

The extractor is a pure read: it only ever *evaluates* the supplied SDF
callable on host points, so map parameters cannot change under it.
"""

import warnings

import numpy as np

from . import autodiff as ad
from . import mc_tables as mc
from .errors import ConfigError


class Mesh:
    """Triangle soup with optional per-vertex attributes.

    vertices   (V,3) float64 world positions
    triangles  (T,3) int64 indices into vertices
    colors     (V,3) float64 in [0,1], or None
    code_index (V,)  int64, or None
    """

    __slots__ = ("vertices", "triangles", "colors", "code_index")

    def __init__(self, vertices, triangles, colors=None, code_index=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.colors = None if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        self.code_index = None if code_index is None else np.asarray(code_index, dtype=np.int64).reshape(-1)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def n_vertices(self):
        return len(self.vertices)

    def n_triangles(self):
        return len(self.triangles)

    def triangle_corners(self):
        """(T,3,3) corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self):
        c = self.triangle_corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)


def _sample_grid(sdf_at, lo, hi, resolution, workers=1):
    """Evaluate sdf_at on a dense lattice, one z-slab at a time.

    Slabs are written into a preallocated array by index, so the result is
    identical no matter how many workers run them.
    """
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    zs = np.linspace(lo[2], hi[2], resolution)
    values = np.empty((resolution, resolution, resolution), dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    flat_xy = np.stack([gx.ravel(), gy.ravel()], axis=1)

    def slab(k):
        pts = np.concatenate([flat_xy, np.full((len(flat_xy), 1), zs[k])], axis=1)
        values[:, :, k] = np.asarray(sdf_at(pts), dtype=np.float64).reshape(resolution, resolution)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(slab, range(resolution)))
    else:
        for k in range(resolution):
            slab(k)
    return xs, ys, zs, values


def marching_cubes(values, xs, ys, zs):
    """Standard 256-case marching cubes over values[i,j,k] = f(xs[i],ys[j],zs[k]).

    Isolevel 0; a lattice point is inside when its value is negative.  Vertices
    are deduplicated by lattice edge, so shared edges yield shared vertices.
    Returns (vertices (V,3), triangles (T,3)).
    """
    R = values.shape[0]
    inside = values < 0.0

    cube_idx = np.zeros((R - 1, R - 1, R - 1), dtype=np.int64)
    for c, (di, dj, dk) in enumerate(mc.CORNERS):
        cube_idx |= inside[di:R - 1 + di, dj:R - 1 + dj, dk:R - 1 + dk].astype(np.int64) << c

    active = (cube_idx > 0) & (cube_idx < 255)
    if not active.any():
        warnings.warn("field has no sign change inside the bounds; mesh is empty")
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)

    # one interpolated vertex per sign-change lattice edge, found globally per axis
    axes = (xs, ys, zs)
    edge_vid = []
    verts = []
    offset = 0
    for a in range(3):
        sl0 = tuple(slice(0, -1) if d == a else slice(None) for d in range(3))
        sl1 = tuple(slice(1, None) if d == a else slice(None) for d in range(3))
        v0, v1 = values[sl0], values[sl1]
        cross = inside[sl0] != inside[sl1]
        vid = np.full(v0.shape, -1, dtype=np.int64)
        n = int(cross.sum())
        vid[cross] = np.arange(offset, offset + n)
        offset += n
        i, j, k = np.nonzero(cross)
        base = np.stack([xs[i], ys[j], zs[k]], axis=1)
        t = v0[cross] / (v0[cross] - v1[cross])  # denominator nonzero: signs differ
        step = axes[a][1] - axes[a][0]
        base[:, a] += t * step
        edge_vid.append(vid)
        verts.append(base)
    vertices = np.concatenate(verts, axis=0)

    ai, aj, ak = np.nonzero(active)
    cell_vid = np.empty((len(ai), 12), dtype=np.int64)
    for e in range(12):
        oi, oj, ok = mc.EDGE_ORIGIN[e]
        cell_vid[:, e] = edge_vid[mc.EDGE_AXIS[e]][ai + oi, aj + oj, ak + ok]

    rows = mc.TRIANGLES[cube_idx[ai, aj, ak]]
    tris = []
    for t0 in range(0, 15, 3):
        m = rows[:, t0] >= 0
        if not m.any():
            break
        local = rows[m, t0:t0 + 3]
        tris.append(np.take_along_axis(cell_vid[m], local, axis=1))
    # table order winds inward for negative-inside fields; emit outward
    triangles = np.concatenate(tris, axis=0)[:, ::-1]

    # drop zero-area triangles (coincident vertices happen when a lattice
    # value is exactly 0 and two edges interpolate to the same point)
    c = vertices[triangles]
    area2 = np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    triangles = triangles[area2 > 0.0]
    return vertices, triangles


def extract_mesh(sdf_at, lo, hi, resolution=128, workers=1):
    """Mesh the zero level set of sdf_at over the box [lo, hi].

    sdf_at: callable (M,3) world points -> (M,) signed distances (host floats).
    resolution: lattice samples per axis, >= 8.
    """
    if resolution < 8:
        raise ConfigError(f"mesh resolution must be >= 8, got {resolution}")
    lo = np.asarray(lo, dtype=np.float64).reshape(3)
    hi = np.asarray(hi, dtype=np.float64).reshape(3)
    if np.any(hi <= lo):
        raise ConfigError("mesh bounds must satisfy hi > lo per axis")
    xs, ys, zs, values = _sample_grid(sdf_at, lo, hi, resolution, workers=workers)
    if not np.isfinite(values).all():
        raise ConfigError("SDF sampler produced non-finite values")
    vertices, triangles = marching_cubes(values, xs, ys, zs)
    return Mesh(vertices, triangles)


def cell_diagonal(lo, hi, resolution):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return float(np.linalg.norm((hi - lo) / (resolution - 1)))


def attach_code_ids(mesh, pipe, chunk=32768):
    """Assign each vertex the codebook index its position quantizes to."""
    n = mesh.n_vertices()
    out = np.empty(n, dtype=np.int64)
    for s in range(0, n, chunk):
        tape = ad.Tape()
        batch = pipe.assemble(tape, mesh.vertices[s:s + chunk])
        if batch.code_idx is None:
            raise ConfigError("query pipeline has no codebook; cannot attach code ids")
        out[s:s + chunk] = batch.code_idx
    mesh.code_index = out
    return mesh


def visible_vertices(vertices, poses, intrinsics, width, height, near=1e-4):
    """Boolean mask: vertex projects inside >= 1 frame's image, in front of it."""
    fx, fy, cx, cy = [float(v) for v in intrinsics]
    seen = np.zeros(len(vertices), dtype=bool)
    for pose in poses:
        pose = np.asarray(pose, dtype=np.float64)
        rel = vertices - pose[:3, 3]
        cam = rel @ pose[:3, :3]  # rows are R^T @ rel
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * cam[:, 0] / z + cx
            v = fy * cam[:, 1] / z + cy
        seen |= (z > near) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
        if seen.all():
            break
    return seen


def cull_mesh(mesh, poses, intrinsics, width, height):
    """Drop triangles none of whose vertices fall in any pose's frustum."""
    if len(poses) == 0:
        return Mesh.empty()
    if mesh.n_triangles() == 0:
        return Mesh(mesh.vertices[:0], mesh.triangles, None, None)
    seen = visible_vertices(mesh.vertices, poses, intrinsics, width, height)
    keep = seen[mesh.triangles].any(axis=1)
    tris = mesh.triangles[keep]
    used, inverse = np.unique(tris, return_inverse=True)
    return Mesh(
        mesh.vertices[used],
        inverse.reshape(-1, 3),
        None if mesh.colors is None else mesh.colors[used],
        None if mesh.code_index is None else mesh.code_index[used],
    )


# --- PLY ------------------------------------------------------------------


def save_ply(mesh, path):
    """Binary little-endian PLY: float32 xyz, optional uchar rgb, optional int32 code_index."""
    names = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {mesh.n_vertices()}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if mesh.colors is not None:
        names += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if mesh.code_index is not None:
        names += [("code_index", "<i4")]
        header += ["property int code_index"]
    header += [
        f"element face {mesh.n_triangles()}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    vert = np.empty(mesh.n_vertices(), dtype=np.dtype(names))
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T.astype(np.float32)
    if mesh.colors is not None:
        rgb = np.clip(np.round(mesh.colors * 255.0), 0, 255).astype(np.uint8)
        vert["red"], vert["green"], vert["blue"] = rgb.T
    if mesh.code_index is not None:
        vert["code_index"] = mesh.code_index.astype(np.int32)
    face = np.empty(mesh.n_triangles(), dtype=np.dtype([("n", "u1"), ("v", "<i4", (3,))]))
    face["n"] = 3
    face["v"] = mesh.triangles.astype(np.int32)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vert.tobytes())
        f.write(face.tobytes())


def load_ply(path):
    """Read meshes written by save_ply (same property layout, binary LE)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "format binary_little_endian 1.0" not in lines[1]:
        raise ValueError(f"{path}: not a binary little-endian PLY")
    counts, props = {}, {"vertex": []}
    element = None
    for ln in lines[2:]:
        parts = ln.split()
        if parts[0] == "element":
            element = parts[1]
            counts[element] = int(parts[2])
            props.setdefault(element, [])
        elif parts[0] == "property" and element == "vertex":
            props["vertex"].append((parts[2], {"float": "<f4", "uchar": "u1", "int": "<i4"}[parts[1]]))
    vert_dtype = np.dtype(props["vertex"])
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    vert = np.frombuffer(data, dtype=vert_dtype, count=nv, offset=end)
    face_dtype = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
    face = np.frombuffer(data, dtype=face_dtype, count=nf, offset=end + vert.nbytes)
    vertices = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    fields = vert_dtype.names
    colors = None
    if "red" in fields:
        colors = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1).astype(np.float64) / 255.0
    code_index = vert["code_index"].astype(np.int64) if "code_index" in fields else None
    return Mesh(vertices, face["v"].astype(np.int64), colors, code_index)
