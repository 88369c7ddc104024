"""Visualize the spatial attention gate.

The gating block predicts one weight per pixel at every encoder stage.
This script renders those maps as ASCII heatmaps for an untrained model and
also writes them to PGM images (the same path the command line uses), so
you can open them in any viewer.
"""

import os
import tempfile

from rgbdfusion.cli import dump_attention
from rgbdfusion.data import SceneSpec, generate_sample
from rgbdfusion.network import (ModelConfig, SegmentationModel, encode_depth,
                                encode_rgb)
from rgbdfusion.tensor import Tensor

SHADES = " .:-=+*#%@"


def ascii_map(arr, width=32):
    lo, hi = arr.min(), arr.max()
    norm = (arr - lo) / (hi - lo) if hi > lo else arr * 0
    step = max(1, arr.shape[0] // 16)
    lines = []
    for row in norm[::step]:
        chars = [SHADES[min(int(v * len(SHADES)), len(SHADES) - 1)]
                 for v in row[::step]]
        lines.append("".join(chars))
    return "\n".join(lines)


cfg = ModelConfig(input_size=(64, 64))
model = SegmentationModel(cfg, seed=0)
sample = generate_sample(5, SceneSpec(height=64, width=64))

rgb_feats = encode_rgb(Tensor(sample.rgb), model)
depth_feats = encode_depth(Tensor(sample.depth), model)

print("ground-truth labels (0 = background):")
print(ascii_map(sample.labels.astype(float)))

for i, blk in enumerate(model.fusion_blocks):
    ws = blk.spatial_attention(rgb_feats[i], depth_feats[i])
    print(f"\nstage {i} spatial gate ({ws.shape[0]}x{ws.shape[1]}), "
          f"range [{ws.min():.3f}, {ws.max():.3f}]:")
    print(ascii_map(ws))

# The PGM dump normalizes each map to the full gray range and records the
# true min/max in a JSON sidecar so the values stay recoverable.
with tempfile.TemporaryDirectory() as d:
    sidecar = dump_attention(model, sample, d)
    print("\nwrote:", ", ".join(sorted(os.listdir(d))))
    for name, meta in sorted(sidecar.items()):
        print(f"  {name}: min {meta['min']:.4f} max {meta['max']:.4f}")
