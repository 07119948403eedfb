"""The per-frame SLAM loop.

Each frame runs: constant-speed pose prediction, pose-only tracking against
the frozen map, TSDF integration, then mapping on a 50/50 mix of current-frame
and keyframe rays.  Every `slam.ba_every`-th frame the mapping iterations also
step the involved poses (bundle adjustment) and the TSDF volume is re-fused
from scratch with the refined trajectory.

Frame 0 is the gauge anchor: its pose block exists but is never trainable.
"""

import math
import os

import numpy as np

from . import autodiff as ad
from . import evaluation
from . import render
from . import se3
from . import tsdf
from .checkpoint import Checkpoint
from .checkpoint import save as save_checkpoint
from .errors import ConfigError, DataError, NumericError, SkipStep
from .fields import Fields
from .losses import (LossLog, commitment_loss, diversity_loss, rendering_loss,
                     sdf_losses, total_loss)
from .quantize import QueryPipeline, normalize_codes
from .tsdf import TsdfGrid


class KeyframePool:
    """Flat list of stored keyframe rays: (frame id, pixel id, color, depth).

    Depth is kept as the along-ray distance so sampling needs no camera
    bookkeeping; poses are looked up live so bundle adjustment moves the
    stored rays with their frame.
    """

    def __init__(self):
        self.frame = np.zeros(0, dtype=np.int64)
        self.pixel = np.zeros(0, dtype=np.int64)
        self.color = np.zeros((0, 3))
        self.depth = np.zeros(0)

    def __len__(self):
        return len(self.frame)

    def add(self, frame_id, pixels, colors, depths):
        self.frame = np.concatenate([self.frame, np.full(len(pixels), frame_id, dtype=np.int64)])
        self.pixel = np.concatenate([self.pixel, pixels])
        self.color = np.concatenate([self.color, colors])
        self.depth = np.concatenate([self.depth, depths])


class SlamSystem:
    def __init__(self, frames, cfg, loss_log=None):
        if not frames:
            raise DataError("no frames to process")
        cfg.validate()
        bounds = cfg.bounds()
        if bounds is None:
            raise ConfigError("scene bounds are not set (scene.bounds_min == bounds_max); "
                              "set them in the config or generate the dataset with a scene")
        self.frames = frames
        self.cfg = cfg
        self.lo, self.hi = bounds
        self.rng = np.random.default_rng(cfg["run.seed"])
        self.loss_log = loss_log

        self.grid = TsdfGrid(self.lo, self.hi,
                             resolution=cfg["tsdf.resolution"],
                             truncation_voxels=cfg["tsdf.truncation_voxels"],
                             weight_cap=cfg["tsdf.weight_cap"])
        self.store = ad.ParamStore()
        self.pipe = QueryPipeline(self.store, cfg, self.lo, self.hi, self.rng,
                                  tsdf_grid=self.grid)
        self.fields = Fields(self.store, cfg, self.rng)

        far = cfg["render.far"]
        self.far = far if far > 0 else float(np.linalg.norm(self.hi - self.lo))
        self.near = cfg["render.near"]
        self.t_render = cfg["render.truncation"]
        self.t_r = self.grid.truncation  # SDF supervision band, world units
        units = cfg["loss.sdf_units"]
        if units == "matched":  # agree with the prior feature's parametrization
            units = "tanh" if cfg["quantize.tanh_enabled"] else "truncation"
        self.sdf_units = units
        self.surface_band = cfg["loss.surface_band"] * self.t_r

        self.pose_stores = []
        self.flags = []            # per frame: tracking reverted to prediction
        self.keyframes = KeyframePool()
        self.convergence = []      # (frame, converge_iter, cumulative)
        self.track_loss = []
        self.map_loss = []
        self.step = 0

        w, h = frames[0].size
        self.width, self.height = w, h
        self.intrinsics = frames[0].intrinsics

    # --- poses ----------------------------------------------------------

    def pose(self, j):
        return self.pose_stores[j].value("pose")

    def pose_matrix(self, j):
        return se3.pose_to_matrix(self.pose(j))

    def pose_matrices(self):
        return np.stack([self.pose_matrix(j) for j in range(len(self.pose_stores))])

    def init_pose(self, j):
        """Constant-speed prediction: replay the last relative motion."""
        if j == 0:
            gt = self.frames[0].gt_pose
            if self.cfg["slam.first_frame_anchor"] == "gt" and gt is not None:
                return se3.matrix_to_pose(np.asarray(gt, dtype=np.float64))
            return np.zeros(6)
        if j == 1:
            return self.pose(0).copy()
        pred = se3.predict_next(self.pose(j - 1), self.pose(j - 2))
        return se3.wrap_rotation(pred)

    # --- ray plumbing -----------------------------------------------------

    def _frame_rays(self, frame_id, pixels):
        """(camera dirs, along-ray obs depth, obs color) for flat pixel ids."""
        frame = self.frames[frame_id]
        px = np.stack([pixels % self.width, pixels // self.width], axis=1).astype(np.float64)
        dirs, dir_z = render.camera_dirs(frame.intrinsics, px)
        z = frame.depth.reshape(-1)[pixels]
        d_along = np.where(z > 0, z / dir_z, 0.0)
        color = frame.rgb.reshape(-1, 3)[pixels].astype(np.float64)
        return dirs, d_along, color

    def _iteration_loss(self, tape, groups, pose_vars):
        """Assemble one optimization step's loss.

        groups: list of (frame_id, dirs_cam (k,3), obs_depth_along (k,), obs_color (k,3)).
        pose_vars: {frame_id: Var} for poses being optimized on this tape;
        other frames contribute rays at their fixed current pose.
        """
        cfg = self.cfg
        d_rows, pts_parts, obs_d, obs_c = [], [], [], []
        on_tape = bool(pose_vars)
        for frame_id, dirs, d_obs, color in groups:
            d = render.sample_ray(d_obs, self.near, self.far, self.surface_band,
                                  self.rng,
                                  n_stratified=cfg["render.n_stratified"],
                                  n_surface=cfg["render.n_surface"])
            n = d.shape[1]
            if frame_id in pose_vars:
                pts = se3.points_on_tape(pose_vars[frame_id],
                                         np.repeat(dirs, n, axis=0), d.reshape(-1))
            else:
                m = self.pose_matrix(frame_id)
                dirs_w = dirs @ m[:3, :3].T
                host = m[:3, 3] + d[:, :, None] * dirs_w[:, None, :]
                host = host.reshape(-1, 3)
                pts = tape.constant(host) if on_tape else host
            pts_parts.append(pts)
            d_rows.append(d)
            obs_d.append(d_obs)
            obs_c.append(color)

        if on_tape:
            pts_var = pts_parts[0] if len(pts_parts) == 1 else ad.concat(pts_parts, axis=0)
            batch = self.pipe.assemble(tape, pts_var.value, points_var=pts_var)
        else:
            batch = self.pipe.assemble(tape, np.concatenate(pts_parts, axis=0))

        d_all = np.concatenate(d_rows, axis=0)
        obs_depth = np.concatenate(obs_d)
        obs_color = np.concatenate(obs_c, axis=0)
        k, n = d_all.shape

        s = self.fields.sdf(tape, batch.x).reshape((k, n))
        c = self.fields.color(tape, batch.x).reshape((k, n * 3))
        w = render.sdf_to_weight(s, self.t_render)
        rgb, depth, valid = render.render_rays_on_tape(tape, d_all, w, c)

        l_color, l_depth = rendering_loss(tape, rgb, depth,
                                          obs_color[valid], obs_depth[valid])
        l_near, l_free = sdf_losses(tape, s, d_all, obs_depth, self.t_r,
                                    units=self.sdf_units)
        terms = {"l_color": l_color, "l_depth": l_depth,
                 "l_near": l_near, "l_free": l_free}
        if batch.code_rows is not None:
            terms["l_commit"] = commitment_loss(batch.g, batch.code_rows,
                                                lam=cfg["loss.lambda"])
            terms["l_diversity"] = diversity_loss(tape.param(self.store, "codebook/codes"))
        return total_loss(tape, terms, cfg), terms

    def _sample_pixels(self, count):
        return self.rng.choice(self.width * self.height, size=count, replace=False)

    # --- per-frame phases ---------------------------------------------------

    def track_frame(self, j):
        """Refine pose j against the frozen map; map parameters never move."""
        cfg = self.cfg
        store_j = self.pose_stores[j]
        init = store_j.value("pose").copy()
        k = cfg["slam.rays_per_step"]
        last = 0.0
        for it in range(cfg["slam.t_track"]):
            pixels = self._sample_pixels(k)
            dirs, d_obs, color = self._frame_rays(j, pixels)
            tape = ad.Tape()
            pose_var = tape.param(store_j, "pose")
            try:
                total, terms = self._iteration_loss(
                    tape, [(j, dirs, d_obs, color)], {j: pose_var})
            except SkipStep:
                continue
            store_j.zero_grad()
            tape.backward(total)
            self.step += 1
            last = float(total.value)
            if self.loss_log:
                self.loss_log.write(self.step, j, terms, last)
            try:
                # decaying step: iteration 0 has enough reach to absorb the
                # constant-velocity prediction error, the last settles sub-mm
                ad.adam_step(store_j,
                             cfg["opt.lr_pose"] * cfg["opt.lr_pose_decay"] ** it)
            except NumericError:
                store_j.set_value("pose", init)
                self.flags[j] = True
                break
            pose = store_j.value("pose")
            if not np.all(np.isfinite(pose)):
                store_j.set_value("pose", init)
                self.flags[j] = True
                break
            store_j.set_value("pose", se3.wrap_rotation(pose))
        self.store.zero_grad()  # tracking leaves no residue on map params
        self.track_loss.append(last)
        return store_j.value("pose")

    def map_frame(self, j, ba):
        """Optimize the map (and poses, on BA frames) on mixed ray batches."""
        cfg = self.cfg
        k = cfg["slam.rays_per_step"]
        t_map = cfg["slam.t_map"]
        threshold = cfg["slam.convergence_threshold"]
        converge = t_map
        last = 0.0
        for it in range(1, t_map + 1):
            k_kf = k // 2 if len(self.keyframes) else 0
            cur_pixels = self._sample_pixels(k - k_kf)
            dirs, d_obs, color = self._frame_rays(j, cur_pixels)
            groups = [(j, dirs, d_obs, color)]
            if k_kf:
                rows = self.rng.integers(0, len(self.keyframes), size=k_kf)
                rows = rows[np.argsort(self.keyframes.frame[rows], kind="stable")]
                for f in np.unique(self.keyframes.frame[rows]):
                    sel = rows[self.keyframes.frame[rows] == f]
                    fdirs, fd, fcol = self._frame_rays(f, self.keyframes.pixel[sel])
                    groups.append((int(f), fdirs, fd, fcol))

            tape = ad.Tape()
            pose_vars = {}
            if ba:
                for frame_id, *_rest in groups:
                    if frame_id not in pose_vars:
                        pose_vars[frame_id] = tape.param(self.pose_stores[frame_id], "pose")
            try:
                total, terms = self._iteration_loss(tape, groups, pose_vars)
            except SkipStep:
                continue
            last = float(total.value)
            l_i = float(terms["l_color"].value)
            if converge == t_map and l_i < threshold:
                converge = it

            self.store.zero_grad()
            for frame_id in pose_vars:
                self.pose_stores[frame_id].zero_grad()
            tape.backward(total)
            self.step += 1
            if self.loss_log:
                self.loss_log.write(self.step, j, terms, last)
            ad.adam_step(self.store, cfg["opt.lr_fields"])
            if "codebook/codes" in self.store:
                normalize_codes(self.store)  # the codebook lives on the unit sphere
            lr_pose = cfg["opt.lr_pose"] * cfg["opt.lr_pose_decay"] ** (it - 1)
            for frame_id in pose_vars:
                ad.adam_step(self.pose_stores[frame_id], lr_pose)
                wrapped = se3.wrap_rotation(self.pose_stores[frame_id].value("pose"))
                self.pose_stores[frame_id].set_value("pose", wrapped)
        self.map_loss.append(last)
        return converge

    def _insert_keyframe(self, j):
        count = math.ceil(self.cfg["slam.keyframe_ray_fraction"] * self.width * self.height)
        pixels = self._sample_pixels(count)  # without replacement
        _, d_obs, color = self._frame_rays(j, pixels)
        self.keyframes.add(j, pixels, color, d_obs)

    def _refuse(self, upto):
        fresh = tsdf.refuse([self.frames[i].depth for i in range(upto + 1)],
                            [self.pose_matrix(i) for i in range(upto + 1)],
                            self.intrinsics, self.lo, self.hi,
                            resolution=self.cfg["tsdf.resolution"],
                            truncation_voxels=self.cfg["tsdf.truncation_voxels"],
                            weight_cap=self.cfg["tsdf.weight_cap"])
        # in place: the query pipeline holds a reference to self.grid
        self.grid.values[...] = fresh.values
        self.grid.weights[...] = fresh.weights

    def process_frame(self, j):
        cfg = self.cfg
        store_j = ad.ParamStore()
        # no per-block rate: pose steps pass an explicit decayed rate
        store_j.add("pose", self.init_pose(j), trainable=j > 0)
        self.pose_stores.append(store_j)
        self.flags.append(False)

        if j > 0:
            self.track_frame(j)
        else:
            self.track_loss.append(0.0)

        self.grid.integrate_frame(self.frames[j].depth, self.pose_matrix(j),
                                  self.intrinsics)
        if j % cfg["slam.keyframe_every"] == 0:
            self._insert_keyframe(j)

        ba = j > 0 and j % cfg["slam.ba_every"] == 0
        converge = self.map_frame(j, ba)
        if ba:
            self._refuse(j)

        cumulative = converge + (self.convergence[-1][2] if self.convergence else 0)
        self.convergence.append((j, converge, cumulative))
        return converge

    def run(self, progress=None):
        for j in range(len(self.frames)):
            self.process_frame(j)
            if progress:
                progress(j, len(self.frames), self.track_loss[-1],
                         self.map_loss[-1], self.convergence[-1][1])
        return self


def write_convergence(path, rows):
    with open(path, "w") as f:
        f.write("frame,converge_iter,cumulative_iters\n")
        for frame, it, cum in rows:
            f.write(f"{frame},{it},{cum}\n")


def run_sequence(frames, cfg, out_dir, progress=None):
    """Full run: SLAM over all frames, then artifacts into out_dir.

    Writes trajectory.txt (TUM format), checkpoint.npz, convergence.csv,
    losses.csv and config_resolved.cfg; returns the SlamSystem.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg.dump(os.path.join(out_dir, "config_resolved.cfg"))
    with LossLog(os.path.join(out_dir, "losses.csv")) as log:
        system = SlamSystem(frames, cfg, loss_log=log)
        system.run(progress=progress)

    stamps = np.array([f.timestamp for f in frames])
    evaluation.write_trajectory(os.path.join(out_dir, "trajectory.txt"),
                                stamps, system.pose_matrices())
    write_convergence(os.path.join(out_dir, "convergence.csv"), system.convergence)
    save_checkpoint(os.path.join(out_dir, "checkpoint.npz"),
                    Checkpoint(system.store, system.grid, cfg, stamps,
                               system.pose_matrices(), system.flags))
    return system
