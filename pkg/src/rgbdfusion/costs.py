"""Analytic parameter and multiply-accumulate (MAC) accounting.

Parameters are exact tensor-element sums. MACs count the dense products in
convolutions, linear maps, and attention (similarity logits plus weighted
sums); elementwise gates, normalization, and interpolation are excluded.
One MAC equals two FLOPs.
"""

from __future__ import annotations

from .fusion import FusionBlock, FusionBlockConfig, SEMHSAParams
from .network import ModelConfig, SegmentationModel

__all__ = [
    "params_linear",
    "params_conv2d",
    "macs_linear",
    "macs_conv2d",
    "macs_attention",
    "count_params",
    "fusion_block_macs",
    "model_macs",
    "count_model",
]

MACS_PER_FLOP = 0.5  # 1 MAC = 2 FLOPs


def params_linear(c_in, c_out, bias=True):
    return c_in * c_out + (c_out if bias else 0)


def params_conv2d(c_in, c_out, k, bias=True):
    return k * k * c_in * c_out + (c_out if bias else 0)


def macs_linear(c_in, c_out, positions=1):
    return c_in * c_out * positions


def macs_conv2d(c_in, c_out, k, out_h, out_w):
    return k * k * c_in * c_out * out_h * out_w


def macs_matmul(m, k, n):
    return m * k * n


def macs_attention(n_tokens, dim):
    # similarity logits (n^2 * dim) plus value aggregation (n^2 * dim)
    return 2 * n_tokens * n_tokens * dim


def count_params(obj):
    """Exact element count of anything exposing parameters()."""
    return sum(t.data.size for _, t in obj.parameters())


def _se_macs(c, reduction):
    hidden = max(c // reduction, 1)
    return macs_linear(c, hidden) + macs_linear(hidden, c)


def _lafs_macs(cfg: FusionBlockConfig, n):
    # two bottlenecks on the pooled vector plus the per-pixel descriptor dot
    return 2 * _se_macs(cfg.c_fused, cfg.se_reduction) + cfg.c_fused * n


def _cma_macs(cfg: FusionBlockConfig, n):
    e = cfg.c_embed
    embed = 2 * macs_linear(cfg.c_rgb, e, n) + 2 * macs_linear(cfg.c_depth, e, n)
    value = macs_linear(cfg.c_fused, 2 * e, n)
    # two subspaces of width e each
    attend = 2 * macs_attention(n, e)
    out = macs_linear(2 * e, cfg.c_out, n)
    return embed + value + attend + out


def fusion_block_macs(cfg: FusionBlockConfig, h, w):
    """Forward MACs of one fusion site on an (h, w) feature map."""
    n = h * w
    c = cfg.c_fused
    if cfg.variant == "cat":
        return macs_linear(c, cfg.c_out, n)
    if cfg.variant == "se_mhsa":
        qkv = 3 * macs_linear(c, c, n)
        heads = SEMHSAParams.HEADS
        attend = heads * macs_attention(n, c // heads)
        return _se_macs(c, cfg.se_reduction) + qkv + attend + macs_linear(c, cfg.c_out, n)
    if cfg.variant == "lafs":
        return _lafs_macs(cfg, n) + macs_linear(c, cfg.c_out, n)
    if cfg.variant == "cma":
        return _cma_macs(cfg, n)
    if cfg.variant == "lafs_cma":
        return _lafs_macs(cfg, n) + _cma_macs(cfg, n)
    raise ValueError(f"unknown variant {cfg.variant!r}")


def _rgb_stage_macs(c_in, c_out, oh, ow):
    return macs_conv2d(c_in, c_out, 3, oh, ow) + macs_conv2d(c_out, c_out, 3, oh, ow)


def _depth_stage_macs(c_in, c_out, oh, ow):
    n = oh * ow
    embed = macs_conv2d(c_in, c_out, 3, oh, ow)
    attn = 4 * macs_linear(c_out, c_out, n) + macs_attention(n, c_out)
    ff = 2 * macs_linear(c_out, c_out, n)
    return embed + attn + ff


def model_macs(cfg: ModelConfig):
    """Forward MACs of the full model at its configured input size."""
    h, w = cfg.input_size
    total = 0
    c_in_rgb, c_in_depth = 3, 1
    qh, qw = h // 4, w // 4
    for i in range(cfg.num_stages):
        oh, ow = h >> (i + 1), w >> (i + 1)
        total += _rgb_stage_macs(c_in_rgb, cfg.rgb_widths[i], oh, ow)
        total += _depth_stage_macs(c_in_depth, cfg.depth_widths[i], oh, ow)
        c_in_rgb, c_in_depth = cfg.rgb_widths[i], cfg.depth_widths[i]
        fcfg = cfg.fusion_config(i)
        total += fusion_block_macs(fcfg, oh, ow)
        # decoder per-stage embedding at the stage's own resolution
        total += macs_linear(fcfg.c_out, cfg.decoder_embed, oh * ow)
    total += macs_linear(cfg.num_stages * cfg.decoder_embed, cfg.decoder_embed, qh * qw)
    total += macs_linear(cfg.decoder_embed, cfg.num_classes, qh * qw)
    return total


def count_model(model: SegmentationModel):
    """(exact parameter count, analytic forward MACs) for a built model."""
    return count_params(model), model_macs(model.cfg)
