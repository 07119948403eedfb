"""Run configuration: a flat, typed, dotted-key table.

One schema drives everything — defaults, file parsing, `--set` overrides,
validation, and the resolved-config echo written next to run artifacts.
Unknown keys are rejected, never ignored: a typo'd override that silently
does nothing costs an afternoon.

Values are typed as int, float, bool, str or vec3 (three comma-separated
reals).  A handful of keys have "auto" sentinels resolved at run time:
scene bounds equal min==max means "take them from the dataset", far = 0
means "scene diagonal", workers = 0 means "all cores".
"""

import numpy as np

from .errors import ConfigError

# key -> (default, type); type in {"int", "float", "bool", "str", "vec3"}
SCHEMA = {
    # scene / quantization domain
    "scene.bounds_min": ((0.0, 0.0, 0.0), "vec3"),
    "scene.bounds_max": ((0.0, 0.0, 0.0), "vec3"),
    # query quantization
    "quantize.lattice_resolution": (12800, "int"),
    "quantize.oneblob_bins": (16, "int"),
    "quantize.hash_levels": (8, "int"),
    "quantize.hash_features": (2, "int"),
    "quantize.hash_table_size": (32768, "int"),
    "quantize.hash_res_min": (16, "int"),
    "quantize.hash_res_max": (256, "int"),
    "quantize.codebook_size": (128, "int"),
    "quantize.codebook_init": ("bernoulli", "str"),  # bernoulli | uniform
    "quantize.snap_enabled": (True, "bool"),
    "quantize.codebook_enabled": (True, "bool"),
    "quantize.tsdf_prior_enabled": (True, "bool"),
    "quantize.tanh_enabled": (True, "bool"),
    "quantize.grid_at_snapped": (False, "bool"),
    # implicit fields
    "fields.hidden_width": (32, "int"),
    "fields.hidden_layers": (2, "int"),
    # renderer
    "render.n_stratified": (32, "int"),
    "render.n_surface": (11, "int"),
    "render.truncation": (0.1, "float"),
    "render.near": (0.05, "float"),
    "render.far": (0.0, "float"),  # 0 = auto (scene diagonal)
    # TSDF fusion
    "tsdf.resolution": (256, "int"),
    "tsdf.truncation_voxels": (10, "int"),
    "tsdf.weight_cap": (128.0, "float"),
    # losses
    "loss.alpha": (0.02, "float"),
    "loss.beta": (0.06, "float"),
    "loss.gamma": (0.0001, "float"),
    "loss.zeta": (200.0, "float"),
    "loss.eta": (2.0, "float"),
    "loss.lambda": (0.1, "float"),
    # matched -> tanh/truncation per quantize.tanh_enabled at the call site
    "loss.sdf_units": ("matched", "str"),
    # half-width of the near-surface training samples, as a fraction of the
    # fusion truncation t_r.  Keep well under 1: the projective TSDF prior is
    # only view-consistent close to the zero crossing, and samples near the
    # back edge of the band read the written/unobserved cliff.
    "loss.surface_band": (0.35, "float"),
    # SLAM loop
    "slam.t_track": (10, "int"),
    "slam.t_map": (10, "int"),
    "slam.rays_per_step": (1024, "int"),
    "slam.keyframe_every": (5, "int"),
    "slam.ba_every": (5, "int"),
    "slam.keyframe_ray_fraction": (0.05, "float"),
    "slam.convergence_threshold": (0.0002, "float"),
    "slam.first_frame_anchor": ("gt", "str"),  # gt | identity
    # optimizer
    "opt.lr_fields": (0.02, "float"),
    "opt.lr_grid": (0.02, "float"),
    "opt.lr_codes": (0.01, "float"),
    "opt.lr_pose": (0.01, "float"),
    # per-iteration geometric decay of the pose rate inside one frame's
    # optimization window: early iterations need enough reach to absorb the
    # constant-velocity prediction error, late ones a sub-mm settle
    "opt.lr_pose_decay": (0.7, "float"),
    "opt.adam_beta1": (0.9, "float"),
    "opt.adam_beta2": (0.99, "float"),
    "opt.adam_eps": (1e-15, "float"),
    # meshing
    "mesh.resolution": (128, "int"),
    # synthetic generation
    "synth.depth_noise_sigma": (0.0, "float"),
    # run plumbing
    "run.seed": (0, "int"),
    "run.workers": (0, "int"),  # 0 = all cores
}


def _parse_value(key, text, typ):
    text = text.strip()
    try:
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ == "vec3":
            parts = [float(x) for x in text.replace("(", "").replace(")", "").split(",")]
            if len(parts) != 3:
                raise ValueError(text)
            return tuple(parts)
        return text
    except ValueError as e:
        raise ConfigError(f"config key '{key}' expects {typ}, got '{text}'") from e


def _format_value(value, typ):
    if typ == "vec3":
        return ", ".join(repr(float(v)) for v in value)
    if typ == "bool":
        return "true" if value else "false"
    if typ == "float":
        return repr(float(value))
    return str(value)


class Config:
    """Typed key-value store over SCHEMA with file/CLI override parsing."""

    def __init__(self, overrides=None):
        self._values = {k: default for k, (default, _t) in SCHEMA.items()}
        if overrides:
            for k, v in overrides.items():
                self.set(k, v)

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key '{key}'")
        return self._values[key]

    def set(self, key, value):
        """Set `key`; strings are parsed per the schema type, anything else
        must already be the right python type."""
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        _default, typ = SCHEMA[key]
        if isinstance(value, str) and typ != "str":
            value = _parse_value(key, value, typ)
        elif typ == "int":
            value = int(value)
        elif typ == "float":
            value = float(value)
        elif typ == "bool":
            value = bool(value)
        elif typ == "vec3":
            value = tuple(float(v) for v in value)
        self._values[key] = value

    def keys(self):
        return list(self._values)

    def copy(self):
        out = Config()
        out._values = dict(self._values)
        return out

    # --- resolved views -------------------------------------------------

    def bounds(self):
        """Scene bounds as (min, max) float arrays, or None when auto."""
        lo = np.asarray(self["scene.bounds_min"], dtype=np.float64)
        hi = np.asarray(self["scene.bounds_max"], dtype=np.float64)
        if np.all(lo == hi):
            return None
        return lo, hi

    def set_bounds(self, lo, hi):
        self.set("scene.bounds_min", tuple(float(v) for v in lo))
        self.set("scene.bounds_max", tuple(float(v) for v in hi))

    def query_width(self):
        k = self["quantize.oneblob_bins"]
        lf = self["quantize.hash_levels"] * self["quantize.hash_features"]
        return 3 + 3 * k + lf + 1

    def samples_per_ray(self):
        return self["render.n_stratified"] + self["render.n_surface"]

    def validate(self):
        if self["quantize.oneblob_bins"] < 2:
            raise ConfigError("quantize.oneblob_bins must be >= 2")
        if self["quantize.lattice_resolution"] < 2:
            raise ConfigError("quantize.lattice_resolution must be >= 2")
        if self["quantize.codebook_size"] < 1:
            raise ConfigError("quantize.codebook_size must be >= 1")
        if self["quantize.codebook_init"] not in ("bernoulli", "uniform"):
            raise ConfigError("quantize.codebook_init must be bernoulli or uniform")
        if self["render.truncation"] <= 0:
            raise ConfigError("render.truncation must be positive")
        if self["render.near"] <= 0:
            raise ConfigError("render.near must be positive")
        far = self["render.far"]
        if far != 0.0 and far <= self["render.near"]:
            raise ConfigError("render.far must exceed render.near (or 0 for auto)")
        if self["tsdf.resolution"] < 8:
            raise ConfigError("tsdf.resolution must be >= 8")
        if self["mesh.resolution"] < 8:
            raise ConfigError("mesh.resolution must be >= 8")
        if self["loss.sdf_units"] not in ("matched", "tanh", "truncation", "world"):
            raise ConfigError(
                "loss.sdf_units must be matched, tanh, truncation or world")
        if self["slam.first_frame_anchor"] not in ("gt", "identity"):
            raise ConfigError("slam.first_frame_anchor must be gt or identity")
        if not 0.0 < self["opt.lr_pose_decay"] <= 1.0:
            raise ConfigError("opt.lr_pose_decay must be in (0, 1]")
        if self["loss.surface_band"] <= 0:
            raise ConfigError("loss.surface_band must be positive")
        for key in ("loss.alpha", "loss.beta", "loss.gamma", "loss.zeta",
                    "loss.eta", "loss.lambda"):
            if self[key] < 0:
                raise ConfigError(f"{key} must be nonnegative")
        for key, (_d, typ) in SCHEMA.items():
            if typ == "int" and key.startswith(("slam.", "fields.", "quantize.h")):
                if self[key] < 1:
                    raise ConfigError(f"{key} must be >= 1")
        return self

    # --- text round trip ------------------------------------------------

    def dumps(self):
        lines = ["# resolved snapslam configuration"]
        section = None
        for key in SCHEMA:
            sec = key.split(".")[0]
            if sec != section:
                lines.append("")
                section = sec
            _default, typ = SCHEMA[key]
            lines.append(f"{key} = {_format_value(self._values[key], typ)}")
        return "\n".join(lines) + "\n"

    def dump(self, path):
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, text):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected 'key = value', got '{raw}'")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value.strip())
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file '{path}': {e}") from e
        return cls.loads(text)


def default_config():
    return Config()
