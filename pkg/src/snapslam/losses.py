"""Optimization objectives: rendering, SDF supervision, codebook terms.

The SDF targets come in three unit conventions, selected by
``loss.sdf_units``:

  * "truncation": the network predicts distances normalized by the
    fusion truncation t_r — free-space target 1, band target
    (D - d_n)/t_r.  This matches the TSDF prior in the query (itself
    normalized) and keeps the rendering weights' bandwidth parameter
    dimensionless.
  * "tanh": targets warped the same way the prior feature is —
    tanh((D - d_n)/t_r)/tanh(1) in the band, 1 in free space.  With the
    compressed prior in the query, the passthrough head fits these
    exactly at initialization (zero crossing and renderer saturation are
    unchanged; the slope at the crossing is 1/tanh(1)).  Without the
    warp, no scalar gain on the compressed prior can fit straight-line
    targets: the residual floor swamps the pose signal during tracking.
  * "world": targets in meters — free-space target t_r, band target
    D - d_n.

The config default is "matched": the runtime resolves it to "tanh" or
"truncation" to agree with whether the query pipeline compresses the
prior (``quantize.tanh_enabled``).

Band membership is always decided in world units (D - d_n vs t_r).

Gradient partitioning of the commitment term: the pull-features-to-codes
half reaches only the hash tables, the pull-codes-to-features half only
the codebook; both sit behind plain (unsquared) L2 norms whose
zero-distance gradient is tamed by the 1e-12 guard inside the norm op.
"""

import csv

import numpy as np

from . import autodiff as ad
from .errors import NumericError, SkipStep


def rendering_loss(tape, rgb, depth, obs_color, obs_depth):
    """Mean squared color / depth error over rendered rays.

    rgb (V,3) and depth (V,) are tape Vars for the valid-render rows;
    obs_color (V,3) and obs_depth (V,) are the matching observations.
    Rays with invalid observed depth (<= 0) are excluded from the depth
    term only.  Color error is the per-ray squared 2-norm, averaged.
    """
    if rgb is None or rgb.value.shape[0] == 0:
        raise SkipStep("no valid rays to render")
    dc = rgb - tape.constant(obs_color)
    l_color = (dc * dc).sum(axis=1).mean()
    mask = np.nonzero(obs_depth > 0)[0]
    if mask.size == 0:
        l_depth = tape.constant(0.0)
    else:
        dd = ad.gather(depth, mask) - tape.constant(obs_depth[mask])
        l_depth = (dd * dd).mean()
    return l_color, l_depth


def sdf_losses(tape, s, d, obs_depth, t_r, units="truncation"):
    """Near-surface and free-space SDF supervision.

    s: (K,N) Var of predicted signed distances; d: (K,N) host sample
    depths; obs_depth: (K,) observed depths (<= 0 drops the whole ray).
    Free space is D - d_n > t_r; the band is |D - d_n| <= t_r; samples
    beyond the surface by more than t_r get no supervision.  Each loss is
    the mean over its contributing samples (0 when empty).

    Returns (l_near, l_free).
    """
    k, n = d.shape
    depth_col = obs_depth[:, None]
    contributing = depth_col > 0
    margin = depth_col - d
    free = (margin > t_r) & contributing
    band = (np.abs(margin) <= t_r) & contributing

    if units == "truncation":
        free_target = np.ones(k * n)
        band_target = (margin / t_r).ravel()
    elif units == "tanh":
        free_target = np.ones(k * n)
        band_target = (np.tanh(margin / t_r) / np.tanh(1.0)).ravel()
    elif units == "world":
        free_target = np.full(k * n, t_r)
        band_target = margin.ravel()
    else:
        raise ValueError(f"unknown sdf units '{units}'")

    flat = s.reshape((k * n,))

    def masked_mse(mask, target):
        idx = np.nonzero(mask.ravel())[0]
        if idx.size == 0:
            return tape.constant(0.0)
        diff = ad.gather(flat, idx) - tape.constant(target[idx])
        return (diff * diff).mean()

    return masked_mse(band, band_target), masked_mse(free, free_target)


def commitment_loss(g, e, lam=0.1):
    """Vector-quantization commitment: ||sg[e] - g|| + lam*||e - sg[g]||.

    g: (M,F) Var of normalized hash features; e: (M,F) Var of the codes
    selected for them (a gather of the codebook block).  Row-wise L2
    norms, averaged over the batch.
    """
    pull_g = ad.l2norm(ad.stop_gradient(e) - g, axis=1).mean()
    pull_e = ad.l2norm(e - ad.stop_gradient(g), axis=1).mean()
    return pull_g + lam * pull_e


def diversity_loss(codes):
    """Sum of pairwise code distances over all ordered pairs.

    Enters the total negatively (weight -gamma), so optimization pushes
    codes apart.  Fewer than two codes -> constant 0.
    """
    b, f = codes.value.shape
    if b < 2:
        return codes.tape.constant(0.0)
    diff = codes.reshape((b, 1, f)) - codes.reshape((1, b, f))
    return ad.l2norm(diff, axis=2).sum()


_TERMS = ("l_color", "l_depth", "l_commit", "l_diversity", "l_near", "l_free")


def total_loss(tape, terms, cfg):
    """Weighted sum of the six components.

    terms: dict with keys l_color, l_depth, l_commit, l_diversity,
    l_near, l_free (Vars; missing or None entries count as 0).  Any
    non-finite component aborts the step with its name.
    """
    vs = {}
    for name in _TERMS:
        v = terms.get(name)
        vs[name] = tape.constant(0.0) if v is None else v
        if not np.all(np.isfinite(vs[name].value)):
            raise NumericError(f"loss component {name} is non-finite")
    return (vs["l_color"]
            + cfg["loss.alpha"] * vs["l_depth"]
            + cfg["loss.beta"] * vs["l_commit"]
            - cfg["loss.gamma"] * vs["l_diversity"]
            + cfg["loss.zeta"] * vs["l_near"]
            + cfg["loss.eta"] * vs["l_free"])


class LossLog:
    """Per-step CSV of loss components.

    Columns: step, frame, l_color, l_depth, l_commit, l_diversity,
    l_near, l_free, total.
    """

    COLUMNS = ("step", "frame") + _TERMS + ("total",)

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.COLUMNS)

    def write(self, step, frame, terms, total):
        row = [step, frame]
        row += [f"{float(terms[name].value):.10g}" if terms.get(name) is not None
                else "0" for name in _TERMS]
        row.append(f"{float(total):.10g}")
        self._w.writerow(row)

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
