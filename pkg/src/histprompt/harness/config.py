"""Tracker and synthetic-world configuration, plus the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..encoder import ChannelConfig
from ..errors import ConfigError
from ..geometry import PATCH
from ..memory import ReadoutConfig


@dataclass(frozen=True)
class TrackerConfig:
    # crops
    template_size: int = 192
    search_size: int = 384
    template_factor: float = 2.0
    search_factor: float = 5.0
    # widths
    c_f: int = 768
    c_k: int = 256
    c_p: int = 384
    c_pk: int = 64
    c_h: int = 256
    # memory schedule
    memory_size: int = 150
    update_interval: int = 20
    warmup_len: int = 10
    warmup_stride: int = 5
    protected_prefix: int = 10
    update_memory: bool = True
    # candidate elimination
    keep_ratio: float = 0.7
    # ablation switches
    use_mask: bool = True
    use_feature: bool = True
    use_ce: bool = True
    include_background: bool = True
    l2_metric: bool = True
    channel_attn: bool = True
    spatial_attn: bool = True
    phi_single_conv: bool = False
    block_norm: bool = False
    # crop/template analysis knobs; 0 disables template refresh
    template_update_interval: int = 0
    crop_from_gt: bool = False
    # weights and surrogate backbone
    weights: str = "random"
    stat_grid: int = 2
    key_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("template_size", "search_size"):
            v = getattr(self, name)
            if v < PATCH or v % PATCH:
                raise ConfigError(f"{name} must be a positive multiple of {PATCH}, got {v}")
        if self.template_factor < 1 or self.search_factor < 1:
            raise ConfigError("crop factors must be >= 1")
        if self.memory_size < 1:
            raise ConfigError("memory_size must be >= 1")
        if self.update_interval < 1 or self.warmup_stride < 1 or self.warmup_len < 0:
            raise ConfigError("update intervals must be positive")
        if self.protected_prefix < 0 or self.template_update_interval < 0:
            raise ConfigError("protected_prefix and template_update_interval must be >= 0")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError("keep_ratio must be in (0, 1]")
        if not (self.use_mask or self.use_feature):
            raise ConfigError("the encoder needs the mask, the feature, or both")
        if self.weights not in ("random", "analytic"):
            raise ConfigError(f"weights must be 'random' or 'analytic', got {self.weights!r}")
        if self.stat_grid < 1 or PATCH % self.stat_grid:
            raise ConfigError(f"stat_grid must divide {PATCH}")
        if min(self.c_f, self.c_k, self.c_p, self.c_pk, self.c_h) < 1:
            raise ConfigError("channel widths must be positive")
        if self.weights == "analytic":
            m = self.stat_dim
            if self.c_pk < m or self.c_f - 1 < m:
                raise ConfigError(
                    f"analytic weights need c_pk >= {m} and c_f > {m} for stat_grid={self.stat_grid}"
                )
            if self.c_p < 2:
                raise ConfigError("analytic weights need c_p >= 2")

    @property
    def channels(self) -> ChannelConfig:
        return ChannelConfig(self.c_f, self.c_k, self.c_p, self.c_pk)

    @property
    def readout(self) -> ReadoutConfig:
        return ReadoutConfig("neg_l2" if self.l2_metric else "dot", self.include_background)

    @property
    def grid(self) -> tuple[int, int]:
        n = self.search_size // PATCH
        return n, n

    @property
    def stat_dim(self) -> int:
        return 3 * self.stat_grid * self.stat_grid

    def replace(self, **changes) -> "TrackerConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def desk(cls, **changes) -> "TrackerConfig":
        """Small analytic-mode configuration used by the synthetic suites."""
        base = dict(c_f=32, c_k=8, c_p=16, c_pk=16, c_h=8, weights="analytic")
        base.update(changes)
        return cls(**base)


@dataclass(frozen=True)
class WorldConfig:
    height: int = 360
    width: int = 480
    frames: int = 100
    target_size: float = 64.0
    aspect: float = 1.0
    scale_amp: float = 0.0
    speed: float = 1.5
    appearance_dim: int = 16
    drift: float = 0.0
    contrast: float = 1.0
    clutter: float = 1.0
    texture_noise: float = 0.1
    sensor_noise: float = 0.03
    occlusions: tuple = field(default=())  # ((start, end, fraction), ...) on 1-based frames
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32 or self.frames < 1:
            raise ConfigError("world needs at least 32x32 pixels and one frame")
        if self.target_size <= 0 or self.aspect <= 0 or not 0 <= self.scale_amp < 1:
            raise ConfigError("target sizes must be positive")
        if self.appearance_dim < 1:
            raise ConfigError("appearance_dim must be positive")
        for occ in self.occlusions:
            if len(occ) != 3 or not 0 <= occ[2] <= 1 or occ[0] > occ[1]:
                raise ConfigError(f"bad occlusion interval {occ}")

    def replace(self, **changes) -> "WorldConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# flat key = value files

WORLD_PREFIX = "world_"


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    try:
        if target_type is bool or target_type == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int or target_type == "int":
            return int(raw)
        if target_type is float or target_type == "float":
            return float(raw)
        if target_type is str or target_type == "str":
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {key}")


def _parse_occlusions(raw: str) -> tuple:
    out = []
    for item in filter(None, (s.strip() for s in raw.split(","))):
        try:
            start, end, frac = item.split(":")
            out.append((int(start), int(end), float(frac)))
        except ValueError as exc:
            raise ConfigError(f"occlusion items look like start:end:fraction, got {item!r}") from exc
    return tuple(out)


def parse_assignments(pairs, *, allow_world: bool = True) -> tuple[dict, dict]:
    """Split ``(key, value)`` strings into tracker and world overrides, typed."""
    tracker_types = {f.name: f.type for f in fields(TrackerConfig)}
    world_types = {f.name: f.type for f in fields(WorldConfig)}
    tracker, world = {}, {}
    for key, raw in pairs:
        key = key.strip()
        if key in tracker_types:
            tracker[key] = _coerce(raw, tracker_types[key], key)
        elif allow_world and key.startswith(WORLD_PREFIX) and key[len(WORLD_PREFIX):] in world_types:
            name = key[len(WORLD_PREFIX):]
            if name == "occlusions":
                world[name] = _parse_occlusions(raw)
            else:
                world[name] = _coerce(raw, world_types[name], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return tracker, world


def read_pairs(text: str):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    seen = set()
    for key, _ in pairs:
        if key in seen:
            raise ConfigError(f"duplicate config key {key!r}")
        seen.add(key)
    return pairs


def load_config(path) -> tuple[TrackerConfig, WorldConfig]:
    """Read a flat config file. ``preset = desk`` starts from the desk configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs = read_pairs(text)
    preset = None
    rest = []
    for key, value in pairs:
        if key == "preset":
            preset = value
        else:
            rest.append((key, value))
    tracker, world = parse_assignments(rest)
    if preset in (None, "full"):
        cfg = TrackerConfig(**tracker)
    elif preset == "desk":
        cfg = TrackerConfig.desk(**tracker)
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    return cfg, WorldConfig(**world)


def dump_config(cfg: TrackerConfig, world: WorldConfig | None = None) -> str:
    lines = [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(TrackerConfig)]
    if world is not None:
        for f in fields(WorldConfig):
            value = getattr(world, f.name)
            if f.name == "occlusions":
                value = ",".join(f"{a}:{b}:{c}" for a, b, c in value)
            lines.append(f"{WORLD_PREFIX}{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
