"""Tile plans and shape invariance of sliding-window inference."""

# %% Tile plans
# Axes shorter than the patch are padded; longer axes get strided starts plus
# one final tile flush with the far edge.
import numpy as np

from voxkit.inference import plan_tiles, sliding_window_predict
from voxkit.models import ModelConfig, build_params
from voxkit.volume_io import Volume

for dims in [(100, 64, 32), (140, 9, 70)]:
    plan = plan_tiles(dims, 64, 32)
    print(dims, "starts:", plan.starts, "pads:", plan.pads, "tiles:", len(plan))

# %% Any shape in, same shape out
cfg = ModelConfig(num_classes=4, base_filters=2, num_scales=2)
params = build_params(cfg, np.random.default_rng(0))
rng = np.random.default_rng(1)
for dims in [(8, 8, 8), (70, 82, 100), (63, 65, 17)]:
    probs = sliding_window_predict(Volume(rng.standard_normal(dims).astype(np.float32)), params, cfg, 64)
    total = probs.values.astype(np.float64).sum(axis=0)
    print(dims, "->", probs.dims, f"| max |sum(p) - 1| = {np.abs(total - 1).max():.1e}")
