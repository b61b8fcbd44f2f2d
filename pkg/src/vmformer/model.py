"""Video Mobile-Former assembly: stem, four stages of blocks, global tokens, head."""

import math
import zlib

import numpy as np

from .config import ConfigError, ModelConfig, parse_config_text, preset
from .container import ContainerError, read_container, write_container
from .nn import Head, Module, Stem, VMFBlock, normal
from .tensor import Tensor, conv_extent


class CheckpointError(ContainerError):
    pass


def _rng(seed, name):
    # Per-submodule streams: ablating one part leaves the others' init unchanged.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def temporal_plan(cfg):
    """(stem temporal stride, per-stage temporal stride at each stage's first block)."""
    if cfg.downsample_position == "stem":
        return cfg.temporal_stride, [1, 1, 1, 1]
    k = int(round(math.log2(cfg.temporal_stride)))
    return 1, [2 if i < k else 1 for i in range(4)]


def stem_frames(cfg, frames):
    stem_stride, _ = temporal_plan(cfg)
    return conv_extent(frames, 3, stem_stride, 1)


class Model(Module):
    def __init__(self, cfg, seed=0, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        stem_stride, stage_t = temporal_plan(cfg)
        self.stem = Stem(_rng(seed, "stem"), cfg.base_dim, stem_stride, dtype)
        d, m = cfg.token_dim, cfg.token_count
        if cfg.former_enabled:
            self.groups = stem_frames(cfg, cfg.frames) if cfg.token_mode == "per-frame" else 1
            self.tokens = normal(_rng(seed, "tokens"), (self.groups * m, d), 0.02, dtype)
        self.blocks = []
        self.stage_of = []
        c_in = cfg.base_dim
        for s, (nb, c) in enumerate(zip(cfg.blocks_per_stage, cfg.stage_channels())):
            for b in range(nb):
                i = len(self.blocks)
                blk = VMFBlock(
                    _rng(seed, f"blocks.{i}"),
                    cfg,
                    c_in,
                    c,
                    spatial_stride=2 if b == 0 else 1,
                    temporal_stride=stage_t[s] if b == 0 else 1,
                    dtype=dtype,
                )
                self.blocks.append(blk)
                self.stage_of.append(s + 1)
                c_in = c
        self.head = Head(
            _rng(seed, "head"), c_in, d if cfg.former_enabled else 0, cfg.head_width_mult, cfg.num_classes, dtype
        )

    def check_input(self, shape):
        cfg = self.config
        if len(shape) != 5 or shape[1] != 3:
            raise ValueError(f"expected clip N x 3 x T x H x W, got {tuple(shape)}")
        _, _, t, h, w = shape
        if h != cfg.resolution or w != cfg.resolution:
            raise ValueError(f"clip is {h}x{w}, model resolution is {cfg.resolution}")
        if t < 3 or t % cfg.temporal_stride:
            raise ValueError(f"{t} frames not divisible by temporal stride {cfg.temporal_stride}")
        if cfg.former_enabled and cfg.token_mode == "per-frame" and stem_frames(cfg, t) != self.groups:
            raise ValueError(f"per-frame tokens were built for {cfg.frames} frames, got {t}")

    def forward(self, clip):
        if not isinstance(clip, Tensor):
            clip = Tensor(np.asarray(clip, dtype=self.dtype))
        self.check_input(clip.shape)
        n = clip.shape[0]
        x = self.stem(clip)
        z = None
        if self.config.former_enabled:
            cfg = self.config
            z = self.tokens.reshape(1, self.groups, cfg.token_count, cfg.token_dim)
            z = z.expand(n, self.groups, cfg.token_count, cfg.token_dim)
        for blk in self.blocks:
            x, z = blk(x, z)
        z0 = None if z is None else z[:, 0, 0].reshape(n, z.shape[-1])
        return self.head(x, z0)

    def state_dict(self):
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = self.parameters()
        unknown = sorted(set(state) - set(params))
        missing = sorted(set(params) - set(state))
        if unknown:
            raise CheckpointError(f"unknown tensor name(s): {unknown[:3]}")
        if strict and missing:
            raise CheckpointError(f"missing tensor(s): {missing[:3]}")
        for k, arr in state.items():
            if params[k].shape != tuple(arr.shape):
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {params[k].shape}")
            params[k].data = np.array(arr, dtype=params[k].dtype)


def build(config, seed=0, dtype=np.float32):
    """Build a model from a ModelConfig or a preset name."""
    if isinstance(config, str):
        config = preset(config)
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"expected ModelConfig or preset name, got {type(config).__name__}")
    return Model(config, seed=seed, dtype=dtype)


def forward(model, clip):
    return model.forward(clip)


def save_checkpoint(model, path):
    meta = model.config.to_text()
    write_container(path, meta, model.state_dict())


def load_checkpoint(path):
    meta, tensors = read_container(path)
    try:
        cfg = parse_config_text(meta)
    except ConfigError as e:
        raise CheckpointError(f"bad config block: {e}") from None
    dtypes = {a.dtype for a in tensors.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    model = Model(cfg, seed=0, dtype=dtype)
    model.load_state_dict(tensors)
    return model
