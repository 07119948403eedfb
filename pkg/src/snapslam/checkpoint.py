"""Single-file run checkpoints.

One .npz holds everything a later process needs: network/grid/codebook
parameters with their Adam moments, the fused TSDF volume, per-frame poses,
and the resolved configuration text.  Writes go through a temp file and an
atomic rename so a crash can never leave a half-written checkpoint behind.
"""

import os
import tempfile

import numpy as np

from .autodiff import ParamStore
from .config import Config
from .errors import ConfigError
from .tsdf import TsdfGrid

CHECKPOINT_VERSION = 1


class Checkpoint:
    __slots__ = ("store", "grid", "cfg", "stamps", "poses", "flags", "frame_count")

    def __init__(self, store, grid, cfg, stamps, poses, flags=None):
        self.store = store
        self.grid = grid
        self.cfg = cfg
        self.stamps = np.asarray(stamps, dtype=np.float64)
        self.poses = np.asarray(poses, dtype=np.float64).reshape(-1, 4, 4)
        if flags is None:
            flags = np.zeros(len(self.poses), dtype=bool)
        self.flags = np.asarray(flags, dtype=bool)
        self.frame_count = len(self.poses)


def save(path, ckpt):
    arrays = {
        "meta/version": np.int64(CHECKPOINT_VERSION),
        "meta/frame_count": np.int64(ckpt.frame_count),
        "config/text": np.array(ckpt.cfg.dumps()),
        "poses/stamps": ckpt.stamps,
        "poses/matrices": ckpt.poses,
        "poses/flags": ckpt.flags,
        "tsdf/values": ckpt.grid.values.astype(np.float32),
        "tsdf/weights": ckpt.grid.weights.astype(np.float32),
        "tsdf/lo": ckpt.grid.lo,
        "tsdf/hi": ckpt.grid.hi,
        "tsdf/resolution": np.int64(ckpt.grid.res),
        "tsdf/truncation_voxels": np.int64(round(ckpt.grid.truncation / ckpt.grid.voxel_size)),
        "tsdf/weight_cap": np.float64(ckpt.grid.weight_cap),
    }
    for name, blk in ckpt.store.state_dict().items():
        arrays[f"params/{name}/value"] = blk["value"]
        arrays[f"params/{name}/m"] = blk["m"]
        arrays[f"params/{name}/v"] = blk["v"]
        arrays[f"params/{name}/step"] = np.int64(blk["step"])
        arrays[f"params/{name}/rate"] = np.float64(np.nan if blk["rate"] is None else blk["rate"])
        arrays[f"params/{name}/trainable"] = np.bool_(blk["trainable"])

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez_compressed(f, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path):
    try:
        data = np.load(path, allow_pickle=False)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint '{path}': {e}") from e
    version = int(data["meta/version"])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint '{path}' has version {version}, this build reads "
            f"version {CHECKPOINT_VERSION}")

    cfg = Config.loads(str(data["config/text"]))

    grid = TsdfGrid(data["tsdf/lo"], data["tsdf/hi"],
                    resolution=int(data["tsdf/resolution"]),
                    truncation_voxels=int(data["tsdf/truncation_voxels"]),
                    weight_cap=float(data["tsdf/weight_cap"]))
    grid.values[...] = data["tsdf/values"].astype(np.float64)
    grid.weights[...] = data["tsdf/weights"].astype(np.float64)

    names = sorted({k.split("/", 1)[1].rsplit("/", 1)[0]
                    for k in data.files if k.startswith("params/")})
    state = {}
    for name in names:
        rate = float(data[f"params/{name}/rate"])
        state[name] = {
            "value": data[f"params/{name}/value"],
            "m": data[f"params/{name}/m"],
            "v": data[f"params/{name}/v"],
            "step": int(data[f"params/{name}/step"]),
            "rate": None if np.isnan(rate) else rate,
            "trainable": bool(data[f"params/{name}/trainable"]),
        }
    store = ParamStore()
    store.load_state_dict(state)

    return Checkpoint(store, grid, cfg,
                      data["poses/stamps"], data["poses/matrices"],
                      data["poses/flags"])
