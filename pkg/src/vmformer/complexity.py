"""Analytic multiply-accumulate and parameter accounting.

Convention: one multiply-accumulate is one FLOP-unit. Softmax, normalization,
activation and pooling cost one unit per input element and are booked to the
category that owns them. Inside the Mobile block, norms and activations are
booked to ``mobile_depthwise`` so that ``mobile_pointwise`` holds only the
1x1x1 convolutions. Token-side bridge work (token norm, query/key/value/output
projections) is ``bridge_tokens``; ``bridge_in`` / ``bridge_out`` hold only the
attention against local features.

Nothing here executes the model; see :mod:`vmformer.counting` for the
instrumented counterpart.
"""

import json
from dataclasses import dataclass, field

from .config import FULL_PRESETS, preset
from .model import Model, build, temporal_plan
from .tensor import conv_extent

CATEGORIES = (
    "stem",
    "mobile_pointwise",
    "mobile_depthwise",
    "bridge_in",
    "bridge_out",
    "bridge_tokens",
    "former_mhsa",
    "former_ffn",
    "dyrelu_generator",
    "head",
)
FORMER_SIDE = ("bridge_in", "bridge_out", "bridge_tokens", "former_mhsa", "former_ffn", "dyrelu_generator")
BUDGET_LIMIT = 0.12


def param_category(name):
    parts = name.split(".")
    if parts[0] in ("stem", "head"):
        return parts[0]
    if parts[0] == "tokens":
        return "former_mhsa"
    sub, leaf = parts[2], parts[3]
    if sub == "mobile":
        return "mobile_pointwise" if leaf in ("expand", "project") else "mobile_depthwise"
    if sub == "former":
        return "former_ffn" if leaf.startswith("ffn") else "former_mhsa"
    if sub == "dyrelu":
        return "dyrelu_generator"
    return sub  # bridge_in / bridge_out


@dataclass
class ParamCensus:
    per_tensor: dict
    by_category: dict

    @property
    def total(self):
        return sum(self.per_tensor.values())


def count_params(model):
    per_tensor = {k: int(v.size) for k, v in model.named_parameters()}
    by_cat = dict.fromkeys(CATEGORIES, 0)
    for k, n in per_tensor.items():
        by_cat[param_category(k)] += n
    return ParamCensus(per_tensor, by_cat)


@dataclass
class FlopReport:
    macs: dict
    params: dict
    input_shape: tuple
    rows: list = field(default_factory=list)

    @property
    def total_macs(self):
        return sum(self.macs.values())

    @property
    def total_params(self):
        return sum(self.params.values())

    def former_share(self):
        total = self.total_macs
        return sum(self.macs[c] for c in FORMER_SIDE) / total if total else 0.0

    def to_text(self):
        lines = [f"input_shape={'x'.join(str(s) for s in self.input_shape)}"]
        for c in CATEGORIES:
            lines.append(f"{c}.macs={self.macs[c]}")
            lines.append(f"{c}.flops_2x={2 * self.macs[c]}")
            lines.append(f"{c}.params={self.params[c]}")
        lines.append(f"total.macs={self.total_macs}")
        lines.append(f"total.flops_2x={2 * self.total_macs}")
        lines.append(f"total.params={self.total_params}")
        return "\n".join(lines) + "\n"

    def to_records(self):
        recs = [{"category": c, "macs": self.macs[c], "params": self.params[c]} for c in CATEGORIES]
        recs.append({"category": "total", "macs": self.total_macs, "params": self.total_params})
        return recs

    def to_json(self):
        return json.dumps({"input_shape": list(self.input_shape), "categories": self.to_records()}, sort_keys=True)


def _norm_shape(input_shape):
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 4:
        shape = (1,) + shape
    return shape


def count_flops(model, input_shape):
    """Per-category MACs for one forward pass over ``input_shape`` (N x 3 x T x H x W, or 3 x T x H x W)."""
    cfg = model.config
    shape = _norm_shape(input_shape)
    model.check_input(shape)
    n, _, t, h, w = shape
    macs = dict.fromkeys(CATEGORIES, 0)
    rows = []  # (layer, output shape, macs) in execution order
    stem_stride, _ = temporal_plan(cfg)

    c0 = cfg.base_dim
    hs, ws = conv_extent(h, 3, 2, 1), conv_extent(w, 3, 2, 1)
    tp = conv_extent(t, 3, stem_stride, 1)
    macs["stem"] += n * c0 * t * hs * ws * 3 * 9 + 2 * n * c0 * t * hs * ws
    macs["stem"] += n * c0 * tp * hs * ws * c0 * 3 + 2 * n * c0 * tp * hs * ws
    rows.append(("stem", (c0, tp, hs, ws), macs["stem"]))

    d, heads = cfg.token_dim, cfg.heads
    groups = getattr(model, "groups", 1)
    m = cfg.token_count
    mt = groups * m
    ffn = int(round(d * cfg.ffn_ratio))
    c, tc, hc, wc = c0, tp, hs, ws
    for i, blk in enumerate(model.blocks):
        mb = blk.mobile
        co, hid, s, st = mb.c_out, mb.hidden, mb.spatial_stride, mb.temporal_stride
        ho, wo = conv_extent(hc, 3, s, 1), conv_extent(wc, 3, s, 1)
        if mb.conv_type == "2D":
            to = conv_extent(tc, 1, st, 0)
            dw = n * hid * to * ho * wo * 9
        elif mb.conv_type == "3D":
            to = conv_extent(tc, 3, st, 1)
            dw = n * hid * to * ho * wo * 27
        else:
            to = conv_extent(tc, 3, st, 1)
            dw = n * hid * tc * ho * wo * 9 + n * hid * to * ho * wo * 3
        l_in, l_out = tc * hc * wc, to * ho * wo
        pre = f"blocks.{i}"

        if cfg.former_enabled:
            tok_in = n * mt * d + n * mt * d * c // heads + n * mt * c * d
            att_in = 2 * n * m * l_in * c + n * heads * m * l_in
            macs["bridge_tokens"] += tok_in
            macs["bridge_in"] += att_in
            rows.append((pre + ".bridge_in", (mt, d), tok_in + att_in))
            mhsa = n * mt * d + n * mt * d * (d // heads) + 2 * n * mt * mt * d + n * heads * mt * mt + n * mt * d * d
            ffn_macs = n * mt * d + 2 * n * mt * d * ffn + n * mt * ffn
            macs["former_mhsa"] += mhsa
            macs["former_ffn"] += ffn_macs
            rows.append((pre + ".former", (mt, d), mhsa + ffn_macs))
            if hasattr(blk, "dyrelu"):
                gen = blk.dyrelu
                gh = gen.fc1.weight.shape[1]
                nout = gen.fc2.weight.shape[1]
                if gen.frame_level:
                    tg, gin = tc, c + d
                    gen_macs = n * c * tc * hc * wc
                else:
                    tg, gin, gen_macs = 1, d, 0
                gen_macs += n * tg * (gin * gh + gh + gh * nout + nout)
                macs["dyrelu_generator"] += gen_macs
                rows.append((pre + ".dyrelu", (tg, nout), gen_macs))

        mob = n * l_in * c * hid + n * l_out * hid * co
        mob_dw = dw + 2 * n * hid * l_in + 2 * n * hid * l_out + n * co * l_out
        macs["mobile_pointwise"] += mob
        macs["mobile_depthwise"] += mob_dw
        rows.append((pre + ".mobile", (co, to, ho, wo), mob + mob_dw))

        if cfg.former_enabled:
            tok_out = n * mt * d + 2 * n * mt * d * co // heads
            att_out = 2 * n * m * l_out * co + n * heads * m * l_out
            macs["bridge_tokens"] += tok_out
            macs["bridge_out"] += att_out
            rows.append((pre + ".bridge_out", (co, to, ho, wo), tok_out + att_out))
        c, tc, hc, wc = co, to, ho, wo

    width = model.head.fc1.weight.shape[1]
    d_head = model.head.fc1.weight.shape[0]
    k = cfg.num_classes
    macs["head"] += n * c * tc * hc * wc + n * d_head * width + n * width + n * width * k
    rows.append(("head", (k,), macs["head"]))
    return FlopReport(macs, count_params(model).by_category, shape, rows)


def budget_report(model, input_shape):
    rep = count_flops(model, input_shape)
    ratio = rep.former_share()
    return {"ratio": ratio, "limit": BUDGET_LIMIT, "pass": ratio < BUDGET_LIMIT, "report": rep}


def preset_model(name, **overrides):
    cfg = preset(name).replace(**overrides) if overrides else preset(name)
    return build(cfg, seed=0)


def budget_table(names=FULL_PRESETS, frames=64):
    out = []
    for name in names:
        model = preset_model(name)
        cfg = model.config
        shape = (1, 3, frames, cfg.resolution, cfg.resolution)
        b = budget_report(model, shape)
        out.append((name, b["report"].total_macs, b["ratio"], b["pass"]))
    return out


def layer_table(model, input_shape):
    """(report, rows) with rows of (layer, output shape, macs, params). Global tokens get their own row."""
    rep = count_flops(model, input_shape)
    per = count_params(model).per_tensor
    out = []
    if "tokens" in per:
        out.append(("tokens", tuple(model.tokens.shape), 0, per["tokens"]))
    for name, shp, mac in rep.rows:
        p = sum(v for k, v in per.items() if k.startswith(name + "."))
        out.append((name, shp, mac, p))
    return rep, out


__all__ = [
    "CATEGORIES",
    "FlopReport",
    "Model",
    "budget_report",
    "budget_table",
    "count_flops",
    "count_params",
    "layer_table",
    "param_category",
]
