"""Model configuration, named presets, and the flat key=value config format."""

import dataclasses
import math
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


TOKEN_MODES = ("per-video", "per-frame")
CONV_TYPES = ("2D", "(2+1)D", "3D")
ACTIVATIONS = ("relu", "dyrelu", "frame-dyrelu")
DOWNSAMPLE_POSITIONS = ("stem", "per-stage")


@dataclass
class ModelConfig:
    blocks_per_stage: tuple = (1, 1, 2, 1)
    base_dim: int = 8
    expansion: float = 2.0
    resolution: int = 32
    temporal_stride: int = 4
    frames: int = 16
    token_count: int = 4
    token_dim: int = 32
    token_mode: str = "per-video"
    conv_type: str = "3D"
    activation: str = "frame-dyrelu"
    downsample_position: str = "stem"
    former_enabled: bool = True
    num_classes: int = 8
    # Widths the architecture leaves open.
    heads: int = 4
    ffn_ratio: float = 2.0
    head_width_mult: int = 4
    dyrelu_reduction: int = 6
    dyrelu_hidden: int = 0  # 0: derive from dyrelu_reduction
    dyrelu_both: bool = True

    def stage_channels(self):
        return [self.base_dim * 2**i for i in range(len(self.blocks_per_stage))]

    def hidden_channels(self, c):
        return int(math.floor(c * self.expansion + 0.5))

    def validate(self):
        if len(self.blocks_per_stage) != 4:
            raise ConfigError(f"need exactly 4 stages, got {len(self.blocks_per_stage)}")
        if min(self.blocks_per_stage) < 1:
            raise ConfigError(f"every stage needs at least one block: {self.blocks_per_stage}")
        if self.base_dim < 1 or self.expansion <= 0:
            raise ConfigError("base_dim and expansion must be positive")
        if self.frames < 3:
            raise ConfigError(f"frames must be >= 3 for the temporal stem, got {self.frames}")
        if self.temporal_stride < 1:
            raise ConfigError("temporal_stride must be >= 1")
        if self.resolution < 2:
            raise ConfigError("resolution must be >= 2")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name, allowed in (
            ("token_mode", TOKEN_MODES),
            ("conv_type", CONV_TYPES),
            ("activation", ACTIVATIONS),
            ("downsample_position", DOWNSAMPLE_POSITIONS),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r} not in {allowed}")
        if self.downsample_position == "per-stage":
            k = int(round(math.log2(self.temporal_stride)))
            if 2**k != self.temporal_stride or k > 4:
                raise ConfigError("per-stage downsampling needs temporal_stride in {1,2,4,8,16}")
        if not self.former_enabled:
            return self
        if self.token_count < 1:
            raise ConfigError(f"token_count must be >= 1, got {self.token_count}")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        for c in self.stage_channels():
            if c % self.heads:
                raise ConfigError(f"stage width {c} not divisible by heads {self.heads}")
        if self.token_mode == "per-frame" and self.downsample_position != "stem":
            raise ConfigError("per-frame tokens need a fixed frame count (downsample_position=stem)")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(name, raw):
    default = getattr(ModelConfig, name, None)
    if name == "blocks_per_stage":
        default = ()
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


FIELD_NAMES = tuple(f.name for f in fields(ModelConfig))


def apply_overrides(cfg, pairs):
    """Apply 'key=value' strings in order (last wins)."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse(key, raw)
    return cfg.replace(**updates)


def parse_config_text(text):
    pairs = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        pairs.append(line)
    return apply_overrides(ModelConfig(), pairs)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


# Widths the architecture leaves open (generator hidden width, head multiplier)
# are calibrated so all four variants land inside the published budgets.
_FULL_SIZE = dict(
    token_count=6,
    token_dim=128,
    frames=64,
    num_classes=400,
    activation="frame-dyrelu",
    dyrelu_hidden=160,
    head_width_mult=12,
)

PRESETS = {
    "vmf-560m": ModelConfig(
        blocks_per_stage=(1, 2, 3, 2), base_dim=16, expansion=2.25, resolution=172, temporal_stride=8, **_FULL_SIZE
    ),
    "vmf-1g": ModelConfig(
        blocks_per_stage=(1, 2, 3, 2), base_dim=16, expansion=2.25, resolution=224, temporal_stride=4, **_FULL_SIZE
    ),
    "vmf-2g": ModelConfig(
        blocks_per_stage=(1, 2, 4, 2), base_dim=20, expansion=2.25, resolution=224, temporal_stride=4, **_FULL_SIZE
    ),
    "vmf-5g": ModelConfig(
        blocks_per_stage=(1, 2, 12, 4), base_dim=24, expansion=3.0, resolution=224, temporal_stride=4, **_FULL_SIZE
    ),
    "micro": ModelConfig(),
}

FULL_PRESETS = ("vmf-560m", "vmf-1g", "vmf-2g", "vmf-5g")


def preset(name):
    try:
        return PRESETS[name].replace()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
