"""Toy asymmetric dual-branch segmentation network.

A wide convolutional branch encodes RGB, a narrow attention-based branch
encodes depth, a fusion block merges the two at every stage, and an MLP-style
decoder maps the fused pyramid back to per-pixel class logits.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .fusion import FusionBlock, FusionBlockConfig, VARIANTS, _param, _linear, _flatten_map, \
    save_params, load_params

__all__ = [
    "ModelConfig",
    "SegmentationModel",
    "encode_rgb",
    "encode_depth",
    "model_forward",
    "multi_scale_infer",
    "save_checkpoint",
    "load_checkpoint",
]

_LN_EPS = 1e-5


@dataclass
class ModelConfig:
    rgb_widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    depth_widths: list = field(default_factory=lambda: [8, 16, 32, 64])
    num_stages: int = 4
    decoder_embed: int = 32
    num_classes: int = 6
    input_size: tuple = (64, 64)
    se_reduction: int = 4
    variant: str = "lafs_cma"
    attn_scale: float | None = None

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        if len(self.rgb_widths) != self.num_stages or len(self.depth_widths) != self.num_stages:
            raise ValueError("width lists must have num_stages entries")
        for dw, rw in zip(self.depth_widths, self.rgb_widths):
            if dw >= rw:
                raise ValueError("depth branch must be narrower than rgb branch at every stage")
        h, w = self.input_size
        div = 2 ** self.num_stages
        if h % div or w % div:
            raise ValueError(f"input size must be divisible by {div}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def fusion_config(self, stage):
        c = self.rgb_widths[stage] + self.depth_widths[stage]
        return FusionBlockConfig(
            c_rgb=self.rgb_widths[stage], c_depth=self.depth_widths[stage],
            c_fused=c, c_embed=c, c_out=c,
            se_reduction=self.se_reduction, variant=self.variant,
            attn_scale=self.attn_scale)

    def to_dict(self):
        return {
            "rgb_widths": list(self.rgb_widths),
            "depth_widths": list(self.depth_widths),
            "num_stages": self.num_stages,
            "decoder_embed": self.decoder_embed,
            "num_classes": self.num_classes,
            "input_size": list(self.input_size),
            "se_reduction": self.se_reduction,
            "variant": self.variant,
            "attn_scale": self.attn_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "input_size": tuple(d.get("input_size", (64, 64)))})

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class _RGBStage:
    """Strided 3x3 conv + channel layernorm + GELU + one residual 3x3 conv."""

    def __init__(self, rng, c_in, c_out):
        self.conv_w = _param(rng, (c_out, c_in, 3, 3), fan_in=9 * c_in)
        self.conv_b = _param(rng, (c_out,), zero=True)
        self.ln_g = Tensor(np.ones(c_out), requires_grad=True)
        self.ln_b = _param(rng, (c_out,), zero=True)
        self.res_w = _param(rng, (c_out, c_out, 3, 3), fan_in=9 * c_out)
        self.res_b = _param(rng, (c_out,), zero=True)

    def parameters(self):
        return [("conv_w", self.conv_w), ("conv_b", self.conv_b),
                ("ln_g", self.ln_g), ("ln_b", self.ln_b),
                ("res_w", self.res_w), ("res_b", self.res_b)]

    def forward(self, x):
        h = T.conv2d(x, self.conv_w, self.conv_b, stride=2, pad=1)
        h = T.gelu(T.layer_norm_channels(h, self.ln_g, self.ln_b, eps=_LN_EPS))
        return T.add(h, T.conv2d(h, self.res_w, self.res_b, stride=1, pad=1))


class _DepthStage:
    """Strided 3x3 patch embed + pre-norm single-head attention + feedforward."""

    def __init__(self, rng, c_in, c_out):
        self.embed_w = _param(rng, (c_out, c_in, 3, 3), fan_in=9 * c_in)
        self.embed_b = _param(rng, (c_out,), zero=True)
        self.ln1_g = Tensor(np.ones(c_out), requires_grad=True)
        self.ln1_b = _param(rng, (c_out,), zero=True)
        self.wq = _param(rng, (c_out, c_out), fan_in=c_out)
        self.wk = _param(rng, (c_out, c_out), fan_in=c_out)
        self.wv = _param(rng, (c_out, c_out), fan_in=c_out)
        self.wo = _param(rng, (c_out, c_out), fan_in=c_out)
        self.bo = _param(rng, (c_out, 1), zero=True)
        self.ln2_g = Tensor(np.ones(c_out), requires_grad=True)
        self.ln2_b = _param(rng, (c_out,), zero=True)
        self.ff1_w = _param(rng, (c_out, c_out), fan_in=c_out)
        self.ff1_b = _param(rng, (c_out, 1), zero=True)
        self.ff2_w = _param(rng, (c_out, c_out), fan_in=c_out)
        self.ff2_b = _param(rng, (c_out, 1), zero=True)
        self.scale = float(np.sqrt(c_out))

    def parameters(self):
        names = ("embed_w", "embed_b", "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo",
                 "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b")
        return [(n, getattr(self, n)) for n in names]

    def attend(self, flat):
        # flat: (C, N) token matrix; pure attention sub-block (no patch merge)
        q = T.matmul(self.wq, flat)
        k = T.matmul(self.wk, flat)
        v = T.matmul(self.wv, flat)
        w = T.softmax(T.matmul(T.transpose(q), k) / self.scale, axis=1)
        att = T.matmul(v, T.transpose(w))
        return _linear(self.wo, self.bo, att)

    def forward(self, x):
        h = T.conv2d(x, self.embed_w, self.embed_b, stride=2, pad=1)
        c, hh, ww = h.shape
        normed = T.layer_norm_channels(h, self.ln1_g, self.ln1_b, eps=_LN_EPS)
        h = T.add(h, T.reshape(self.attend(T.reshape(normed, (c, hh * ww))), (c, hh, ww)))
        normed = T.layer_norm_channels(h, self.ln2_g, self.ln2_b, eps=_LN_EPS)
        flat = T.reshape(normed, (c, hh * ww))
        ff = _linear(self.ff2_w, self.ff2_b, T.gelu(_linear(self.ff1_w, self.ff1_b, flat)))
        return T.add(h, T.reshape(ff, (c, hh, ww)))


class _Decoder:
    """Per-stage linear embed, upsample to 1/4 scale, concat, fuse, classify."""

    def __init__(self, rng, fused_widths, embed, num_classes):
        self.embeds = []
        for i, c in enumerate(fused_widths):
            self.embeds.append((_param(rng, (embed, c), fan_in=c),
                                _param(rng, (embed, 1), zero=True)))
        n = len(fused_widths) * embed
        self.fuse_w = _param(rng, (embed, n), fan_in=n)
        self.fuse_b = _param(rng, (embed, 1), zero=True)
        self.cls_w = _param(rng, (num_classes, embed), fan_in=embed)
        self.cls_b = _param(rng, (num_classes, 1), zero=True)

    def parameters(self):
        out = []
        for i, (w, b) in enumerate(self.embeds):
            out += [(f"embed{i}_w", w), (f"embed{i}_b", b)]
        out += [("fuse_w", self.fuse_w), ("fuse_b", self.fuse_b),
                ("cls_w", self.cls_w), ("cls_b", self.cls_b)]
        return out

    def forward(self, fused_maps, out_h, out_w):
        qh, qw = out_h // 4, out_w // 4
        ups = []
        for (w, b), fm in zip(self.embeds, fused_maps):
            emb = _linear(w, b, _flatten_map(fm))
            emb = T.reshape(emb, (emb.shape[0],) + fm.shape[1:])
            ups.append(T.bilinear_upsample(emb, qh, qw) if fm.shape[1:] != (qh, qw) else emb)
        cat = T.concat(ups, axis=0)
        fused = _linear(self.fuse_w, self.fuse_b, _flatten_map(cat))
        logits = _linear(self.cls_w, self.cls_b, fused)
        logits = T.reshape(logits, (logits.shape[0], qh, qw))
        return T.bilinear_upsample(logits, out_h, out_w)


class SegmentationModel:
    """Encoders, per-stage fusion blocks, and decoder, built from one seed.

    Encoder and decoder parameters depend only on the seed, not on the fusion
    variant, so ablations isolate the fusion blocks.
    """

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        enc_rng = np.random.default_rng([int(seed), 0])
        self.rgb_stages = []
        c_in = 3
        for c_out in cfg.rgb_widths:
            self.rgb_stages.append(_RGBStage(enc_rng, c_in, c_out))
            c_in = c_out
        self.depth_stages = []
        c_in = 1
        for c_out in cfg.depth_widths:
            self.depth_stages.append(_DepthStage(enc_rng, c_in, c_out))
            c_in = c_out
        fused_widths = [cfg.rgb_widths[i] + cfg.depth_widths[i] for i in range(cfg.num_stages)]
        self.decoder = _Decoder(enc_rng, fused_widths, cfg.decoder_embed, cfg.num_classes)
        self.fusion_blocks = [
            FusionBlock(cfg.fusion_config(i), np.random.default_rng([int(seed), 1, i]))
            for i in range(cfg.num_stages)
        ]

    def parameters(self):
        out = []
        for i, s in enumerate(self.rgb_stages):
            out += [(f"rgb{i}.{n}", t) for n, t in s.parameters()]
        for i, s in enumerate(self.depth_stages):
            out += [(f"depth{i}.{n}", t) for n, t in s.parameters()]
        for i, b in enumerate(self.fusion_blocks):
            out += [(f"fusion{i}.{n}", t) for n, t in b.parameters()]
        out += [(f"decoder.{n}", t) for n, t in self.decoder.parameters()]
        return out

    def encoder_decoder_parameters(self):
        return [(n, t) for n, t in self.parameters() if not n.startswith("fusion")]

    def rgb_branch_params(self):
        return sum(t.data.size for s in self.rgb_stages for _, t in s.parameters())

    def depth_branch_params(self):
        return sum(t.data.size for s in self.depth_stages for _, t in s.parameters())

    def num_params(self):
        return sum(t.data.size for _, t in self.parameters())


def _check_input(x, channels, name):
    if x.shape[0] != channels:
        raise ValueError(f"{name} input must have {channels} channels, got {x.shape[0]}")
    if x.shape[1] % 16 or x.shape[2] % 16:
        raise ValueError(f"{name} input size {x.shape[1:]} not divisible by 16")


def encode_rgb(image, model):
    """Run the convolutional branch; returns one feature map per stage."""
    _check_input(image, 3, "rgb")
    feats = []
    h = image
    for stage in model.rgb_stages:
        h = stage.forward(h)
        feats.append(h)
    return feats


def encode_depth(depth, model):
    """Run the attention branch; returns one feature map per stage."""
    _check_input(depth, 1, "depth")
    feats = []
    h = depth
    for stage in model.depth_stages:
        h = stage.forward(h)
        feats.append(h)
    return feats


def model_forward(rgb, depth, model):
    """Full forward pass: (num_classes, H, W) logits."""
    if rgb.shape[1:] != depth.shape[1:]:
        raise ValueError("rgb and depth inputs must be spatially aligned")
    h, w = rgb.shape[1:]
    rgb_feats = encode_rgb(rgb, model)
    depth_feats = encode_depth(depth, model)
    fused = [blk.forward(rf, df)
             for blk, rf, df in zip(model.fusion_blocks, rgb_feats, depth_feats)]
    return model.decoder.forward(fused, h, w)


def multi_scale_infer(rgb, depth, model, scales):
    """Average logits over rescaled forward passes (inference only)."""
    rgb_arr = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb, dtype=np.float64)
    depth_arr = depth.data if isinstance(depth, Tensor) else np.asarray(depth, dtype=np.float64)
    h, w = rgb_arr.shape[1:]
    if not scales:
        raise ValueError("at least one scale required")
    acc = None
    for s in scales:
        sh, sw = round(h * s), round(w * s)
        if sh < 16 or sw < 16 or sh % 16 or sw % 16:
            raise ValueError(f"scale {s} gives size ({sh},{sw}) not divisible by 16")
        if (sh, sw) == (h, w):
            r, d = rgb_arr, depth_arr
        else:
            r = T.resize_bilinear(rgb_arr, sh, sw)
            d = T.resize_bilinear(depth_arr, sh, sw)
        logits = model_forward(Tensor(r), Tensor(d), model).data
        if (sh, sw) != (h, w):
            logits = T.resize_bilinear(logits, h, w)
        acc = logits if acc is None else acc + logits
    return Tensor(acc / len(scales))


def save_checkpoint(out_dir, model):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(model.cfg.to_dict(), fh, indent=2, sort_keys=True)
    save_params(out_dir, model.parameters())


def load_checkpoint(in_dir, seed=0):
    cfg = ModelConfig.from_json(os.path.join(in_dir, "config.json"))
    model = SegmentationModel(cfg, seed=seed)
    load_params(in_dir, model.parameters())
    return model
