"""Analytic parameter and MAC counting.

Every layer's cost is a closed-form expression, so the counter needs no
forward pass and no hooks. This script prints the cost table for the five
fusion variants and breaks the default model down by component.
"""

import numpy as np

from rgbdfusion.costs import (count_model, fusion_block_macs, macs_conv2d,
                              model_macs, params_conv2d, params_linear)
from rgbdfusion.fusion import FusionBlock, FusionBlockConfig, VARIANTS
from rgbdfusion.network import ModelConfig, SegmentationModel

# ---------------------------------------------------------------------------
# 1. Worked examples you can verify on paper
# ---------------------------------------------------------------------------
print("linear 8 -> 4 with bias:     ", params_linear(8, 4), "params  (8*4 + 4)")
print("conv 3x3, 2 -> 3 channels:   ", params_conv2d(2, 3, 3),
      "params  (3*3*2*3 + 3)")
print("same conv on an 8x8 map:     ", macs_conv2d(2, 3, 3, 8, 8),
      "MACs    (3*3*2*3 * 64)")

# ---------------------------------------------------------------------------
# 2. Fusion variants at one stage's widths
# ---------------------------------------------------------------------------
cfg_kw = dict(c_rgb=16, c_depth=8, c_fused=24, c_embed=24, c_out=24)
print(f"\n{'variant':<10} {'params':>8} {'MACs @16x16':>12}")
for variant in VARIANTS:
    cfg = FusionBlockConfig(variant=variant, **cfg_kw)
    n = FusionBlock(cfg, np.random.default_rng(0)).num_params()
    m = fusion_block_macs(cfg, 16, 16)
    print(f"{variant:<10} {n:>8,} {m:>12,}")
print("note the ordering: plain concat is cheapest, gating adds a little,")
print("attention adds a lot, and the combined block costs the most. The")
print("same ordering holds for the published full-scale models.")

# ---------------------------------------------------------------------------
# 3. Whole-model budget per variant
# ---------------------------------------------------------------------------
print(f"\n{'variant':<10} {'params':>10} {'MACs @64x64':>14}")
for variant in VARIANTS:
    cfg = ModelConfig(variant=variant)
    model = SegmentationModel(cfg, seed=0)
    params, macs = count_model(model)
    assert macs == model_macs(cfg)  # analytic formula agrees with the walker
    print(f"{variant:<10} {params:>10,} {macs:>14,}")
