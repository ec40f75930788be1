"""Wall-clock effect of slicing: half the heads and FFN channels removed.

Pin BLAS to one thread for a clean single-core comparison:
  OMP_NUM_THREADS=1 OPENBLAS_NUM_THREADS=1 python3 demos/05_inference_speedup.py
"""

import numpy as np

from prunecast.model import Forecaster, ForecasterConfig
from prunecast.slicing import slice_pruned
from prunecast.training import bench_inference

cfg = ForecasterConfig(layers=12, heads=8, d_model=256, d_ffn=1024, patch_len=8,
                       context_len=512, horizon=96)
pruned = Forecaster(cfg, seed=0)
original = pruned.clone()

for block in pruned.blocks:
    for h in range(0, cfg.heads, 2):
        g = pruned.head_group(h)
        for layer in (block.wq, block.wk, block.wv):
            layer.m_out[g] = 0.0
        block.wo.m_in[g] = 0.0
    block.ffn_up.m_out[::2] = 0.0
    block.ffn_down.m_in[::2] = 0.0

sliced = slice_pruned(pruned)
batch = np.random.default_rng(2).normal(0, 1, (4, cfg.context_len))
gap = np.abs(sliced.predict(batch) - pruned.predict(batch)).max()
print(f"sliced model keeps {sliced.param_fraction():.0%} of the parameters; "
      f"forward gap vs masked {gap:.1e}")

slow = bench_inference(original, batch, repeats=20, warmup=3)
fast = bench_inference(sliced, batch, repeats=20, warmup=3)
print(f"original: {slow['mean_s'] * 1e3:7.1f} ms ± {slow['std_s'] * 1e3:.1f}")
print(f"sliced:   {fast['mean_s'] * 1e3:7.1f} ms ± {fast['std_s'] * 1e3:.1f}")
print(f"speedup:  {slow['mean_s'] / fast['mean_s']:.2f}x")
