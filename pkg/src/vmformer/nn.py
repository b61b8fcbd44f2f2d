"""Building blocks: stem, 3D Mobile block, Former block, the two bridges,
frame-level dynamic ReLU, and the classifier head.

Token tensors are laid out as ``N x G x M x d`` where ``G`` is the number of
attention groups: 1 for video-level tokens, ``T'`` for per-frame tokens. Local
features entering a bridge are reshaped to ``N x G x L x C`` with the same
grouping, so one code path serves both token modes.
"""

import math

import numpy as np

from . import tensor as tn
from .counting import scope
from .tensor import Tensor

DYRELU_LAMBDA_A = 1.0
DYRELU_LAMBDA_B = 0.5


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(values, dtype):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def normal(rng, shape, std, dtype):
    values = rng.standard_normal(shape) * std
    if std == 0:
        values = np.zeros(shape)  # draw kept so later streams do not shift; avoid -0.0
    return param(values, dtype)


def norm_groups(c, cap=8):
    """Largest divisor of c not exceeding cap."""
    return max(g for g in range(1, min(cap, c) + 1) if c % g == 0)


# -- functional attention --------------------------------------------------------
def split_heads(t, heads):
    """(..., L, C) -> (..., H, L, C/H)."""
    *lead, length, c = t.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible into {heads} heads")
    t = t.reshape(*lead, length, heads, c // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return t.transpose(axes)


def merge_heads(t):
    """(..., H, L, c) -> (..., L, H*c)."""
    *lead, h, length, c = t.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return t.transpose(axes).reshape(*lead, length, h * c)


def attention_weights(q, k):
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    scores = (q @ k.swap_last()) * (1.0 / math.sqrt(q.shape[-1]))
    return scores.softmax(-1)


def attention(q, k, v):
    """softmax(q k^T / sqrt(d_h)) v over the last two axes."""
    return attention_weights(q, k) @ v


def project_heads(z, w):
    """Per-head projection: z (..., M, d), w (H, d/H, c) -> (..., H, M, c)."""
    return split_heads(z, w.shape[0]) @ w


def mhsa(z, wq, wo):
    """Self-attention over tokens; only queries are projected, keys/values are the raw head splits."""
    heads = wq.shape[0]
    q = project_heads(z, wq)
    zs = split_heads(z, heads)
    return merge_heads(attention(q, zs, zs)) @ wo


def mobile_to_former(z, xt, wq, wo):
    """Tokens read local features. z (..., M, d), xt (..., L, C) -> update (..., M, d)."""
    heads = wq.shape[0]
    with scope("bridge_tokens"):
        q = project_heads(z, wq)
    with scope("bridge_in"):
        out = attention(q, split_heads(xt, heads), split_heads(xt, heads))
    with scope("bridge_tokens"):
        return merge_heads(out) @ wo


def former_to_mobile(xt, z, wk, wv):
    """Local features read tokens. xt (..., L, C), z (..., M, d) -> update (..., L, C)."""
    heads = wk.shape[0]
    with scope("bridge_tokens"):
        k = project_heads(z, wk)
        v = project_heads(z, wv)
    with scope("bridge_out"):
        return merge_heads(attention(split_heads(xt, heads), k, v))


def to_local_tokens(x, groups):
    """N x C x T x H x W -> N x G x L x C."""
    n, c, t, h, w = x.shape
    if groups == 1:
        return x.reshape(n, 1, c, t * h * w).transpose(0, 1, 3, 2)
    if groups != t:
        raise ValueError(f"{groups} token groups for {t} frames")
    return x.reshape(n, c, t, h * w).transpose(0, 2, 3, 1)


def from_local_tokens(xt, shape):
    n, c, t, h, w = shape
    if xt.shape[1] == 1:
        return xt.transpose(0, 1, 3, 2).reshape(shape)
    return xt.transpose(0, 3, 1, 2).reshape(shape)


# -- modules -----------------------------------------------------------------------
class GroupNorm(Module):
    def __init__(self, c, dtype):
        self.groups = norm_groups(c)
        self.weight = param(np.ones(c), dtype)
        self.bias = param(np.zeros(c), dtype)

    def forward(self, x):
        return tn.group_norm(x, self.groups, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, dtype):
        self.weight = param(np.ones(d), dtype)
        self.bias = param(np.zeros(d), dtype)

    def forward(self, x):
        return tn.layer_norm(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype, zero=False):
        std = 0.0 if zero else 1.0 / math.sqrt(d_in)
        self.weight = normal(rng, (d_in, d_out), std, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    def forward(self, x):
        return x @ self.weight + self.bias


def stem_convs(video, w_spatial, w_temporal, temporal_stride, between=None):
    """Factorized (2+1)D stem convolution: 1x3x3 spatial (stride 2), then 3x1x1 temporal (stride s_t)."""
    if video.shape[2] < 3:
        raise ValueError(f"stem needs at least 3 frames, got {video.shape[2]}")
    x = tn.conv3d(video, w_spatial, stride=(1, 2, 2), padding=(0, 1, 1))
    if between is not None:
        x = between(x)
    return tn.conv3d(x, w_temporal, stride=(temporal_stride, 1, 1), padding=(1, 0, 0))


class Stem(Module):
    def __init__(self, rng, c0, temporal_stride, dtype):
        self.temporal_stride = temporal_stride
        self.spatial = normal(rng, (c0, 3, 1, 3, 3), math.sqrt(2.0 / 27), dtype)
        self.norm1 = GroupNorm(c0, dtype)
        self.temporal = normal(rng, (c0, c0, 3, 1, 1), math.sqrt(2.0 / (3 * c0)), dtype)
        self.norm2 = GroupNorm(c0, dtype)

    def forward(self, video):
        with scope("stem"):
            x = stem_convs(
                video, self.spatial, self.temporal, self.temporal_stride, lambda h: self.norm1(h).relu()
            )
            return self.norm2(x).relu()


class MobileBlock(Module):
    """Inverted bottleneck: expand 1x1x1 -> act -> depthwise -> act -> project 1x1x1 (+ residual)."""

    def __init__(self, rng, c_in, c_out, hidden, spatial_stride, temporal_stride, conv_type, dtype):
        self.c_in, self.c_out, self.hidden = c_in, c_out, hidden
        self.spatial_stride, self.temporal_stride = spatial_stride, temporal_stride
        self.conv_type = conv_type
        self.expand = normal(rng, (hidden, c_in), math.sqrt(2.0 / c_in), dtype)
        self.norm1 = GroupNorm(hidden, dtype)
        if conv_type == "3D":
            self.dw = normal(rng, (hidden, 3, 3, 3), math.sqrt(2.0 / 27), dtype)
        elif conv_type == "2D":
            self.dw = normal(rng, (hidden, 1, 3, 3), math.sqrt(2.0 / 9), dtype)
        else:
            self.dw = normal(rng, (hidden, 1, 3, 3), math.sqrt(2.0 / 9), dtype)
            self.dw_t = normal(rng, (hidden, 3, 1, 1), math.sqrt(2.0 / 3), dtype)
        self.norm2 = GroupNorm(hidden, dtype)
        self.project = normal(rng, (c_out, hidden), math.sqrt(1.0 / hidden), dtype)
        self.norm3 = GroupNorm(c_out, dtype)

    def depthwise(self, h):
        s, st = self.spatial_stride, self.temporal_stride
        if self.conv_type == "3D":
            return tn.conv3d_depthwise(h, self.dw, (st, s, s), (1, 1, 1))
        if self.conv_type == "2D":
            return tn.conv3d_depthwise(h, self.dw, (st, s, s), (0, 1, 1))
        h = tn.conv3d_depthwise(h, self.dw, (1, s, s), (0, 1, 1))
        return tn.conv3d_depthwise(h, self.dw_t, (st, 1, 1), (1, 0, 0))

    def forward(self, x, coeffs=(None, None)):
        with scope("mobile_pointwise"):
            h = tn.conv3d_pointwise(x, self.expand)
        with scope("mobile_depthwise"):
            h = _activate(self.norm1(h), coeffs[0])
            h = _activate(self.norm2(self.depthwise(h)), coeffs[1])
        with scope("mobile_pointwise"):
            h = tn.conv3d_pointwise(h, self.project)
        with scope("mobile_depthwise"):
            h = self.norm3(h)
        if h.shape == x.shape:
            h = h + x
        return h


def _activate(x, coeffs):
    if coeffs is None:
        return x.relu()
    return tn.dyrelu(x, *coeffs)


class DyReluGenerator(Module):
    """Generates per-frame, per-channel (a1, b1, a2, b2) for the Mobile block activations.

    With ``frame_level`` the input for frame t is [avg-pooled frame feature, z0];
    otherwise it is z0 alone and one set of coefficients covers every frame.
    The output layer starts at zero, which makes the activation exactly ReLU.
    """

    def __init__(self, rng, c_in, d, hidden, channels, n_act, frame_level, dtype):
        self.channels, self.n_act, self.frame_level = channels, n_act, frame_level
        gin = c_in + d if frame_level else d
        self.fc1 = Linear(rng, gin, hidden, dtype)
        self.fc2 = Linear(rng, hidden, n_act * 4 * channels, dtype, zero=True)

    def forward(self, x, z0):
        n = x.shape[0]
        with scope("dyrelu_generator"):
            tok = z0.reshape(n, 1, z0.shape[-1])
            if self.frame_level:
                frames = tn.avg_pool_per_frame(x)
                inp = tn.concat([frames, tok.expand(n, frames.shape[1], tok.shape[-1])], axis=-1)
            else:
                inp = tok
            u = self.fc2(self.fc1(inp).relu())
            s = u.sigmoid() * 2.0 - 1.0
        tg = inp.shape[1]
        s = s.reshape(n, tg, self.n_act, 4, self.channels).transpose(0, 2, 3, 4, 1)
        s = s.reshape(n, self.n_act, 4, self.channels, tg, 1, 1)
        out = []
        for j in range(self.n_act):
            sj = s[:, j]
            out.append(
                (
                    sj[:, 0] * DYRELU_LAMBDA_A + 1.0,
                    sj[:, 1] * DYRELU_LAMBDA_B,
                    sj[:, 2] * DYRELU_LAMBDA_A,
                    sj[:, 3] * DYRELU_LAMBDA_B,
                )
            )
        return out


def frame_level_dyrelu(x, frame_feats, z0, fc1, fc2):
    """Functional form of the frame-level dynamic ReLU on a single activation.

    x: N x C x T x H x W, frame_feats: N x T x C, z0: N x d. Returns the
    activated tensor and the generated coefficients as an N x T x C x 4 array
    ordered (a1, b1, a2, b2).
    """
    n, c, t = x.shape[:3]
    tok = z0.reshape(n, 1, z0.shape[-1]).expand(n, t, z0.shape[-1])
    u = fc2(fc1(tn.concat([frame_feats, tok], axis=-1)).relu())
    s = (u.sigmoid() * 2.0 - 1.0).reshape(n, t, 4, c)
    a1 = s[:, :, 0] * DYRELU_LAMBDA_A + 1.0
    b1 = s[:, :, 1] * DYRELU_LAMBDA_B
    a2 = s[:, :, 2] * DYRELU_LAMBDA_A
    b2 = s[:, :, 3] * DYRELU_LAMBDA_B

    def bcast(v):
        return v.transpose(0, 2, 1).reshape(n, c, t, 1, 1)

    y = tn.dyrelu(x, bcast(a1), bcast(b1), bcast(a2), bcast(b2))
    params = np.stack([a1.data, b1.data, a2.data, b2.data], axis=-1)
    return y, params


class MobileToFormer(Module):
    def __init__(self, rng, c, d, heads, dtype):
        self.wq = normal(rng, (heads, d // heads, c // heads), 1.0 / math.sqrt(d // heads), dtype)
        self.wo = normal(rng, (c, d), 1.0 / math.sqrt(c), dtype)

    def forward(self, z, x, groups):
        with scope("bridge_tokens"):
            zn = tn.layer_norm(z)
        return z + mobile_to_former(zn, to_local_tokens(x, groups), self.wq, self.wo)


class FormerToMobile(Module):
    def __init__(self, rng, c, d, heads, dtype):
        self.wk = normal(rng, (heads, d // heads, c // heads), 1.0 / math.sqrt(d // heads), dtype)
        self.wv = normal(rng, (heads, d // heads, c // heads), 1.0 / math.sqrt(d // heads), dtype)

    def forward(self, x, z, groups):
        with scope("bridge_tokens"):
            zn = tn.layer_norm(z)
        upd = former_to_mobile(to_local_tokens(x, groups), zn, self.wk, self.wv)
        return x + from_local_tokens(upd, x.shape)


class FormerBlock(Module):
    """Pre-norm transformer block over the global tokens."""

    def __init__(self, rng, d, heads, ffn_ratio, dtype):
        dh = d // heads
        hidden = int(round(d * ffn_ratio))
        self.norm1 = LayerNorm(d, dtype)
        self.wq = normal(rng, (heads, dh, dh), 1.0 / math.sqrt(dh), dtype)
        self.wo = normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        self.ffn_norm = LayerNorm(d, dtype)
        self.ffn_in = Linear(rng, d, hidden, dtype)
        self.ffn_out = Linear(rng, hidden, d, dtype)

    def forward(self, z):
        """z: N x G x M x d; self-attention spans all G*M tokens."""
        shape = z.shape
        flat = z.reshape(shape[0], shape[1] * shape[2], shape[3])
        with scope("former_mhsa"):
            flat = flat + mhsa(self.norm1(flat), self.wq, self.wo)
        with scope("former_ffn"):
            flat = flat + self.ffn_out(self.ffn_in(self.ffn_norm(flat)).gelu())
        return flat.reshape(shape)


def former_block(z, blk):
    """Functional alias: apply a FormerBlock to an M x d (or batched) token matrix."""
    z4 = z.reshape((1,) * (4 - z.ndim) + z.shape)
    return blk(z4).reshape(z.shape)


class Head(Module):
    def __init__(self, rng, c, d, width_mult, num_classes, dtype):
        width = width_mult * (c + d)
        self.fc1 = Linear(rng, c + d, width, dtype)
        self.fc2 = Linear(rng, width, num_classes, dtype)

    def forward(self, x, z0=None):
        with scope("head"):
            f = tn.global_avg_pool(x)
            if z0 is not None:
                f = tn.concat([f, z0], axis=-1)
            return self.fc2(self.fc1(f).relu())


def classifier_head(features, z0, head):
    return head(features, z0)


class VMFBlock(Module):
    """One Video Mobile-Former block: Mobile -> Former bridge, Former, Mobile block, Former -> Mobile bridge."""

    def __init__(self, rng, cfg, c_in, c_out, spatial_stride, temporal_stride, dtype):
        self.c_in, self.c_out = c_in, c_out
        hidden = cfg.hidden_channels(c_out)
        self.mobile = MobileBlock(rng, c_in, c_out, hidden, spatial_stride, temporal_stride, cfg.conv_type, dtype)
        self.former_enabled = cfg.former_enabled
        self.dyrelu_both = cfg.dyrelu_both
        if not cfg.former_enabled:
            return
        d, heads = cfg.token_dim, cfg.heads
        self.bridge_in = MobileToFormer(rng, c_in, d, heads, dtype)
        self.former = FormerBlock(rng, d, heads, cfg.ffn_ratio, dtype)
        self.bridge_out = FormerToMobile(rng, c_out, d, heads, dtype)
        if cfg.activation != "relu":
            frame_level = cfg.activation == "frame-dyrelu"
            gin = c_in + d if frame_level else d
            gen_hidden = cfg.dyrelu_hidden or max(1, gin // cfg.dyrelu_reduction)
            n_act = 2 if cfg.dyrelu_both else 1
            self.dyrelu = DyReluGenerator(rng, c_in, d, gen_hidden, hidden, n_act, frame_level, dtype)

    def forward(self, x, z):
        if not self.former_enabled:
            return self.mobile(x), z
        groups = z.shape[1]
        z = self.bridge_in(z, x, groups)
        z = self.former(z)
        coeffs = (None, None)
        if hasattr(self, "dyrelu"):
            n = z.shape[0]
            gen = self.dyrelu(x, z[:, 0, 0].reshape(n, z.shape[-1]))
            first = gen[0]
            if len(gen) == 2:
                second = gen[1]
                st = self.mobile.temporal_stride
                if st > 1 and second[0].shape[2] > 1:
                    second = tuple(c[:, :, ::st] for c in second)
            else:
                second = None
            coeffs = (first, second)
        x = self.mobile(x, coeffs)
        x = self.bridge_out(x, z, groups)
        return x, z
