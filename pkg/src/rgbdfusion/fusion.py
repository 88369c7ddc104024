"""Multi-modal fusion blocks.

Four ways of merging an RGB feature map with a Depth feature map at one
network stage:

* ``cat``       - channel concat + 1x1 projection (no selection)
* ``se_mhsa``   - squeeze-excitation channel gating + 2-head self-attention
* ``lafs``      - learned channel gating + learned spatial gating, where the
                  spatial weights come from a dot product between each pixel
                  and a dynamically predicted channel descriptor
* ``cma``       - cross-modal attention: per-modality key/query embeddings are
                  concatenated, channel-shuffled into two mixed subspaces, and
                  each subspace runs softmax attention over a split value map
* ``lafs_cma``  - lafs selection feeding cma embedding
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("cat", "se_mhsa", "lafs", "cma", "lafs_cma")

__all__ = [
    "VARIANTS",
    "FusionBlockConfig",
    "LAFSParams",
    "CMAParams",
    "CatParams",
    "SEMHSAParams",
    "FusionBlock",
    "lafs_forward",
    "lafs_spatial_weights",
    "cma_embed_shuffle",
    "cma_attend",
    "baseline_fusion",
    "save_params",
    "load_params",
]


@dataclass
class FusionBlockConfig:
    """Channel widths and variant selector for one fusion site."""

    c_rgb: int
    c_depth: int
    c_fused: int
    c_embed: int
    c_out: int
    se_reduction: int = 4
    variant: str = "lafs_cma"
    attn_scale: float | None = None  # override for the subspace softmax denominator

    def __post_init__(self):
        if self.c_fused != self.c_rgb + self.c_depth:
            raise ValueError("c_fused must equal c_rgb + c_depth at the concat point")
        if self.c_embed % 4 != 0:
            raise ValueError("c_embed must be divisible by 4 (two shuffled subspaces)")
        if self.se_reduction > self.c_fused or self.se_reduction < 1:
            raise ValueError("se_reduction must be in [1, c_fused]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}")

    def subspace_scale(self):
        if self.attn_scale is not None:
            return self.attn_scale
        return float(np.sqrt(self.c_embed / 4.0))


def _param(rng, shape, fan_in=None, zero=False, name=None):
    if zero:
        data = np.zeros(shape)
    else:
        bound = 1.0 / np.sqrt(fan_in if fan_in else shape[-1])
        data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _linear(w, b, x):
    # x: (in, N); returns (out, N)
    y = T.matmul(w, x)
    return T.add(y, b) if b is not None else y


class _ParamSet:
    """Base for parameter containers: ordered (name, tensor) access."""

    _names: tuple = ()

    def parameters(self):
        return [(n, getattr(self, n)) for n in self._names]

    def num_params(self):
        return sum(t.data.size for _, t in self.parameters())


class _SEBottleneck(_ParamSet):
    """Two linear maps C -> C/r -> C, ReLU inside, sigmoid out."""

    _names = ("w1", "b1", "w2", "b2")

    def __init__(self, rng, c, reduction, prefix=""):
        hidden = max(c // reduction, 1)
        self.w1 = _param(rng, (hidden, c), fan_in=c, name=prefix + "w1")
        # positive bias keeps the narrow ReLU bottleneck alive at init
        self.b1 = Tensor(np.full((hidden, 1), 0.5), requires_grad=True, name=prefix + "b1")
        self.w2 = _param(rng, (c, hidden), fan_in=hidden, name=prefix + "w2")
        self.b2 = _param(rng, (c, 1), zero=True, name=prefix + "b2")

    def forward(self, v):
        # v: (C, 1) column vector
        h = T.relu(_linear(self.w1, self.b1, v))
        return T.sigmoid(_linear(self.w2, self.b2, h))


class LAFSParams(_ParamSet):
    """Channel-gating bottleneck plus spatial-descriptor bottleneck."""

    def __init__(self, rng, c_fused, reduction):
        self.c_fused = c_fused
        self.channel = _SEBottleneck(rng, c_fused, reduction, "channel.")
        self.spatial = _SEBottleneck(rng, c_fused, reduction, "spatial.")

    def parameters(self):
        return ([("channel." + n, t) for n, t in self.channel.parameters()]
                + [("spatial." + n, t) for n, t in self.spatial.parameters()])

    def num_params(self):
        return sum(t.data.size for _, t in self.parameters())


def _lafs_gates(inp, params):
    c, h, w = inp.shape
    avg = T.reshape(T.adaptive_avg_pool_global(inp), (c, 1))
    w_c = T.reshape(params.channel.forward(avg), (c, 1, 1))
    r_avg = params.spatial.forward(avg)                       # (C, 1)
    flat = T.reshape(inp, (c, h * w))
    logits = T.matmul(T.transpose(flat), r_avg) / float(c * c)  # (H*W, 1)
    w_s = T.reshape(T.sigmoid(logits), (1, h, w))
    return w_c, w_s


def lafs_forward(rgb, depth, params):
    """Select concatenated features with channel and spatial gates."""
    if rgb.shape[1:] != depth.shape[1:]:
        raise ValueError(f"spatial mismatch: {rgb.shape} vs {depth.shape}")
    inp = T.concat([rgb, depth], axis=0)
    if inp.shape[0] != params.c_fused:
        raise ValueError(f"expected {params.c_fused} fused channels, got {inp.shape[0]}")
    w_c, w_s = _lafs_gates(inp, params)
    return T.mul(T.mul(inp, w_c), w_s)


def lafs_spatial_weights(rgb, depth, params):
    """The (1,H,W) spatial gate alone, for visualization."""
    inp = T.concat([rgb, depth], axis=0)
    _, w_s = _lafs_gates(inp, params)
    return w_s.data[0]


class CMAParams(_ParamSet):
    """Per-modality key/query embeddings, fused value map, output projection.

    The output projection starts at zero so the block is the identity on its
    fused input at initialization.
    """

    _names = ("wk_rgb", "bk_rgb", "wq_rgb", "bq_rgb",
              "wk_depth", "bk_depth", "wq_depth", "bq_depth",
              "wv", "bv", "wo", "bo")

    def __init__(self, rng, cfg: FusionBlockConfig):
        e = cfg.c_embed
        self.wk_rgb = _param(rng, (e, cfg.c_rgb), fan_in=cfg.c_rgb)
        self.bk_rgb = _param(rng, (e, 1), zero=True)
        self.wq_rgb = _param(rng, (e, cfg.c_rgb), fan_in=cfg.c_rgb)
        self.bq_rgb = _param(rng, (e, 1), zero=True)
        self.wk_depth = _param(rng, (e, cfg.c_depth), fan_in=cfg.c_depth)
        self.bk_depth = _param(rng, (e, 1), zero=True)
        self.wq_depth = _param(rng, (e, cfg.c_depth), fan_in=cfg.c_depth)
        self.bq_depth = _param(rng, (e, 1), zero=True)
        self.wv = _param(rng, (2 * e, cfg.c_fused), fan_in=cfg.c_fused)
        self.bv = _param(rng, (2 * e, 1), zero=True)
        self.wo = _param(rng, (cfg.c_out, 2 * e), zero=True)
        self.bo = _param(rng, (cfg.c_out, 1), zero=True)


def _flatten_map(x):
    c = x.shape[0]
    return T.reshape(x, (c, int(np.prod(x.shape[1:]))))


def cma_embed_shuffle(rgb, depth, fused, params, cfg):
    """Embed, concatenate, shuffle and split into two mixed subspaces.

    Returns (k1, k2, q1, q2, v1, v2), each (c_embed, H*W) for k/q and
    (c_embed, H*W) for the unshuffled value halves.
    """
    if not (rgb.shape[1:] == depth.shape[1:] == fused.shape[1:]):
        raise ValueError("cma inputs must be spatially aligned")
    rf, df, ff = _flatten_map(rgb), _flatten_map(depth), _flatten_map(fused)
    k_rgb = _linear(params.wk_rgb, params.bk_rgb, rf)
    q_rgb = _linear(params.wq_rgb, params.bq_rgb, rf)
    k_depth = _linear(params.wk_depth, params.bk_depth, df)
    q_depth = _linear(params.wq_depth, params.bq_depth, df)
    key = T.channel_shuffle(T.concat([k_rgb, k_depth], axis=0), 2)
    query = T.channel_shuffle(T.concat([q_rgb, q_depth], axis=0), 2)
    k1, k2 = T.split(key, 2, axis=0)
    q1, q2 = T.split(query, 2, axis=0)
    v1, v2 = T.split(_linear(params.wv, params.bv, ff), 2, axis=0)
    return k1, k2, q1, q2, v1, v2


def _subspace_attend(q, k, v, scale):
    logits = T.matmul(T.transpose(q), k) / scale      # (HW, HW), rows = query pixels
    weights = T.softmax(logits, axis=1)
    return T.matmul(v, T.transpose(weights))          # (e, HW)


def cma_attend(k1, k2, q1, q2, v1, v2, fused_residual, params, cfg):
    """Two-subspace attention, concat, output projection, residual add."""
    c_res = fused_residual.shape[0]
    if cfg.c_out != c_res:
        raise ValueError(f"residual has {c_res} channels, output projection gives {cfg.c_out}")
    scale = cfg.subspace_scale()
    o1 = _subspace_attend(q1, k1, v1, scale)
    o2 = _subspace_attend(q2, k2, v2, scale)
    fused2 = T.concat([o1, o2], axis=0)
    out = _linear(params.wo, params.bo, fused2)
    return T.add(T.reshape(out, fused_residual.shape), fused_residual)


class CatParams(_ParamSet):
    _names = ("w", "b")

    def __init__(self, rng, cfg):
        self.w = _param(rng, (cfg.c_out, cfg.c_fused), fan_in=cfg.c_fused)
        self.b = _param(rng, (cfg.c_out, 1), zero=True)


class SEMHSAParams(_ParamSet):
    """SE gating on the concat, then 2-head self-attention with residual."""

    HEADS = 2

    def __init__(self, rng, cfg):
        c = cfg.c_fused
        self.se = _SEBottleneck(rng, c, cfg.se_reduction, "se.")
        self.wq = _param(rng, (c, c), fan_in=c)
        self.bq = _param(rng, (c, 1), zero=True)
        self.wk = _param(rng, (c, c), fan_in=c)
        self.bk = _param(rng, (c, 1), zero=True)
        self.wv = _param(rng, (c, c), fan_in=c)
        self.bv = _param(rng, (c, 1), zero=True)
        self.wo = _param(rng, (cfg.c_out, c), fan_in=c)
        self.bo = _param(rng, (cfg.c_out, 1), zero=True)

    def parameters(self):
        return ([("se." + n, t) for n, t in self.se.parameters()]
                + [(n, getattr(self, n)) for n in
                   ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")])

    def num_params(self):
        return sum(t.data.size for _, t in self.parameters())


def _se_gate(inp, bottleneck):
    c = inp.shape[0]
    avg = T.reshape(T.adaptive_avg_pool_global(inp), (c, 1))
    return T.reshape(bottleneck.forward(avg), (c, 1, 1))


def _mhsa(x_flat, params, heads):
    c, n = x_flat.shape
    head_dim = c // heads
    scale = float(np.sqrt(head_dim))
    q = _linear(params.wq, params.bq, x_flat)
    k = _linear(params.wk, params.bk, x_flat)
    v = _linear(params.wv, params.bv, x_flat)
    outs = []
    for h in range(heads):
        qs = T.split(q, heads, axis=0)[h]
        ks = T.split(k, heads, axis=0)[h]
        vs = T.split(v, heads, axis=0)[h]
        outs.append(_subspace_attend(qs, ks, vs, scale))
    return T.concat(outs, axis=0)


def baseline_fusion(rgb, depth, params, cfg):
    """The two ablation baselines: plain concat or SE + 2-head MHSA."""
    if rgb.shape[1:] != depth.shape[1:]:
        raise ValueError(f"spatial mismatch: {rgb.shape} vs {depth.shape}")
    inp = T.concat([rgb, depth], axis=0)
    c, h, w = inp.shape
    if cfg.variant == "cat":
        out = _linear(params.w, params.b, _flatten_map(inp))
        return T.reshape(out, (cfg.c_out, h, w))
    if cfg.variant == "se_mhsa":
        gated = T.mul(inp, _se_gate(inp, params.se))
        flat = _flatten_map(gated)
        attended = T.add(flat, _mhsa(flat, params, SEMHSAParams.HEADS))
        out = _linear(params.wo, params.bo, attended)
        return T.reshape(out, (cfg.c_out, h, w))
    raise ValueError(f"unknown baseline variant {cfg.variant!r}")


class _LAFSOnlyParams(_ParamSet):
    """LAFS gating followed by a 1x1 projection to the stage's output width."""

    def __init__(self, rng, cfg):
        self.lafs = LAFSParams(rng, cfg.c_fused, cfg.se_reduction)
        self.proj_w = _param(rng, (cfg.c_out, cfg.c_fused), fan_in=cfg.c_fused)
        self.proj_b = _param(rng, (cfg.c_out, 1), zero=True)

    def parameters(self):
        return ([("lafs." + n, t) for n, t in self.lafs.parameters()]
                + [("proj_w", self.proj_w), ("proj_b", self.proj_b)])

    def num_params(self):
        return sum(t.data.size for _, t in self.parameters())


class _CMAOnlyParams(_ParamSet):
    def __init__(self, rng, cfg):
        self.cma = CMAParams(rng, cfg)

    def parameters(self):
        return [("cma." + n, t) for n, t in self.cma.parameters()]


class _LAFSCMAParams(_ParamSet):
    def __init__(self, rng, cfg):
        self.lafs = LAFSParams(rng, cfg.c_fused, cfg.se_reduction)
        self.cma = CMAParams(rng, cfg)

    def parameters(self):
        return ([("lafs." + n, t) for n, t in self.lafs.parameters()]
                + [("cma." + n, t) for n, t in self.cma.parameters()])

    def num_params(self):
        return sum(t.data.size for _, t in self.parameters())


class FusionBlock:
    """One fusion site, dispatching on the configured variant."""

    def __init__(self, cfg: FusionBlockConfig, rng):
        self.cfg = cfg
        if cfg.variant == "cat":
            self.params = CatParams(rng, cfg)
        elif cfg.variant == "se_mhsa":
            self.params = SEMHSAParams(rng, cfg)
        elif cfg.variant == "lafs":
            self.params = _LAFSOnlyParams(rng, cfg)
        elif cfg.variant == "cma":
            self.params = _CMAOnlyParams(rng, cfg)
        elif cfg.variant == "lafs_cma":
            self.params = _LAFSCMAParams(rng, cfg)
        else:
            raise ValueError(f"unknown fusion variant {cfg.variant!r}")

    def parameters(self):
        return self.params.parameters()

    def num_params(self):
        return self.params.num_params()

    def forward(self, rgb, depth):
        cfg = self.cfg
        if cfg.variant in ("cat", "se_mhsa"):
            return baseline_fusion(rgb, depth, self.params, cfg)
        if cfg.variant == "lafs":
            selected = lafs_forward(rgb, depth, self.params.lafs)
            out = _linear(self.params.proj_w, self.params.proj_b, _flatten_map(selected))
            return T.reshape(out, (cfg.c_out,) + rgb.shape[1:])
        if cfg.variant == "cma":
            fused = T.concat([rgb, depth], axis=0)
        else:  # lafs_cma
            fused = lafs_forward(rgb, depth, self.params.lafs)
        cma = self.params.cma
        parts = cma_embed_shuffle(rgb, depth, fused, cma, cfg)
        return cma_attend(*parts, fused, cma, cfg)

    def spatial_attention(self, rgb, depth):
        """LAFS spatial gate as a plain (H,W) array, or None for non-LAFS."""
        if self.cfg.variant in ("lafs", "lafs_cma"):
            return lafs_spatial_weights(rgb, depth, self.params.lafs)
        return None


# -- parameter serialization -------------------------------------------------

def save_params(out_dir, named_params, manifest_name="manifest.json"):
    """One tensor file per parameter plus a manifest of names and shapes."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {}
    for name, t in named_params:
        fname = name.replace("/", "_").replace(".", "_") + ".atsr"
        T.save_tensor(os.path.join(out_dir, fname), t.data)
        manifest[name] = {"file": fname, "shape": list(t.data.shape)}
    with open(os.path.join(out_dir, manifest_name), "w") as fh:
        json.dump({"tensors": manifest}, fh, indent=2, sort_keys=True)


def load_params(in_dir, named_params, manifest_name="manifest.json"):
    """Load saved values into existing parameter tensors, in place."""
    with open(os.path.join(in_dir, manifest_name)) as fh:
        manifest = json.load(fh)["tensors"]
    for name, t in named_params:
        entry = manifest[name]
        arr = T.load_tensor(os.path.join(in_dir, entry["file"]))
        if tuple(arr.shape) != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
        t.data[...] = arr
