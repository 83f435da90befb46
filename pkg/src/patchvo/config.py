"""Model configuration: the single source of truth shared by the runtime
pipeline and the analytical cost model.

Two presets are provided. ``baseline()`` is the full-size reference
configuration (128/384 feature channels, 96 patches, removal window 22,
patch lifetime 13, every block enabled). ``tiny()`` is the reduced
configuration for constrained targets (64/96 channels, 24 patches, removal
window 12, lifetime 10, no pyramid level, no by-pass connections, and the
lightweight recurrent unit instead of the GRU).

Configs round-trip through a flat ``key = value`` text file; unknown keys
are rejected so typos fail loudly.
"""

import hashlib
from dataclasses import dataclass, field, fields, asdict

from .errors import ConfigError

SAMPLE_STRATEGIES = ("event_density", "uniform_random")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def scaled(self, factor):
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                self.cx * factor, self.cy * factor)

    @classmethod
    def default_for(cls, width, height):
        # rough desk-scale default when a dataset ships no calibration
        return cls(fx=0.75 * width, fy=0.75 * width,
                   cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)


@dataclass
class ModelConfig:
    # input geometry
    width: int = 240
    height: int = 180
    bins: int = 5                    # temporal bins per voxel grid
    # feature extractor widths
    mf_channels: int = 128           # matching-feature channels
    cf_channels: int = 384           # context channels == update hidden size
    # patch graph
    patches_per_frame: int = 96
    removal_window: int = 22         # frames a patch stays in the graph
    patch_lifetime: int = 13         # temporal span over which edges form
    opt_window: int = 10             # bundle-adjustment window (frames)
    corr_radius: int = 3             # half-width of the correlation lookup
    # block toggles
    use_pyramid: bool = True         # 1/16-scale second matching level
    use_bypass: bool = True          # residual skips in the extractor
    use_temporal: bool = True        # temporal convolutions in the update
    use_softmax_agg: bool = True     # scatter-softmax aggregations
    use_gru: bool = True             # GRU (False: lightweight replacement)
    # runtime knobs
    sample_strategy: str = "event_density"
    update_iterations: int = 1       # update/BA rounds per new frame
    ba_iterations: int = 2           # LM iterations per round
    ba_init_iterations: int = 12     # LM iterations on the very first window
    prune_threshold: float = 0.5     # feature pixels; 0 disables pruning
    huber_delta: float = 1.0
    lm_lambda0: float = 1e-4

    def __post_init__(self):
        self.validate()

    def validate(self):
        bad = []
        for name in ("width", "height", "bins", "mf_channels", "cf_channels",
                     "patches_per_frame", "removal_window", "patch_lifetime",
                     "opt_window", "corr_radius", "update_iterations",
                     "ba_iterations", "ba_init_iterations"):
            if getattr(self, name) < 1:
                bad.append(f"{name}={getattr(self, name)} (must be >= 1)")
        if self.sample_strategy not in SAMPLE_STRATEGIES:
            bad.append(f"sample_strategy={self.sample_strategy!r} "
                       f"(one of {SAMPLE_STRATEGIES})")
        if self.prune_threshold < 0:
            bad.append(f"prune_threshold={self.prune_threshold} (must be >= 0)")
        if self.huber_delta <= 0:
            bad.append(f"huber_delta={self.huber_delta} (must be > 0)")
        if self.lm_lambda0 <= 0:
            bad.append(f"lm_lambda0={self.lm_lambda0} (must be > 0)")
        if bad:
            raise ConfigError("invalid configuration: " + "; ".join(bad))
        return self

    @classmethod
    def baseline(cls, width=240, height=180, **overrides):
        return cls(width=width, height=height, **overrides)

    @classmethod
    def tiny(cls, width=240, height=180, **overrides):
        params = dict(
            mf_channels=64, cf_channels=96,
            patches_per_frame=24, removal_window=12, patch_lifetime=10,
            use_pyramid=False, use_bypass=False, use_gru=False,
            use_temporal=True, use_softmax_agg=True,
        )
        params.update(overrides)
        return cls(width=width, height=height, **params)

    @classmethod
    def preset(cls, name, **overrides):
        try:
            return {"baseline": cls.baseline, "tiny": cls.tiny}[name](**overrides)
        except KeyError:
            raise ConfigError(f"unknown preset {name!r} (use 'baseline' or 'tiny')") from None

    # --- derived quantities -------------------------------------------------

    @property
    def corr_levels(self):
        return 2 if self.use_pyramid else 1

    @property
    def corr_length(self):
        """Per-edge correlation feature length."""
        side = 2 * self.corr_radius + 1
        return self.corr_levels * side * side * 9

    def config_hash(self):
        text = ",".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **overrides):
        params = asdict(self)
        params.update(overrides)
        return ModelConfig(**params)


def save_config(config, path, intrinsics=None, extras=None):
    """Write the flat key-value config file (one ``key = value`` per line)."""
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    if intrinsics is not None:
        lines += [f"fx = {intrinsics.fx}", f"fy = {intrinsics.fy}",
                  f"cx = {intrinsics.cx}", f"cy = {intrinsics.cy}"]
    for key, value in (extras or {}).items():
        lines.append(f"{key} = {value}")
    with open(path, "w") as fp:
        fp.write("\n".join(lines) + "\n")


# keys accepted in config files beyond the ModelConfig fields: camera
# calibration and the event-windowing policy used by the CLI
EXTRA_KEYS = {
    "fx": float, "fy": float, "cx": float, "cy": float,
    "window_us": int, "events_per_window": int,
}


def load_config(path):
    """Parse the flat key-value file; returns (ModelConfig, intrinsics, extras).

    ``intrinsics`` is None unless all of fx/fy/cx/cy are present.
    """
    field_types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    extras = {}
    with open(path) as fp:
        for lineno, raw in enumerate(fp, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in field_types:
                values[key] = _coerce(field_types[key], value, key, path, lineno)
            elif key in EXTRA_KEYS:
                extras[key] = _coerce(EXTRA_KEYS[key].__name__, value, key, path, lineno)
            else:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
    config = ModelConfig(**values)
    intrinsics = None
    if all(k in extras for k in ("fx", "fy", "cx", "cy")):
        intrinsics = CameraIntrinsics(extras.pop("fx"), extras.pop("fy"),
                                      extras.pop("cx"), extras.pop("cy"))
    return config, intrinsics, extras


def _coerce(type_name, value, key, path, lineno):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: cannot parse {key} = {value!r} "
                          f"as {type_name}") from None
