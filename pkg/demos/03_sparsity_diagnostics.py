"""Forward-pass sparsity diagnostics on a briefly trained forecaster:
per-head relative output norms, FFN activation probabilities, magnitude CDFs.

Run:  python3 demos/03_sparsity_diagnostics.py  [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from prunecast.analysis import (collect_activation_probs, collect_head_norms,
                                magnitude_cdf, sparse_channel_fraction,
                                write_ffn_probs_csv, write_head_norms_csv,
                                write_magnitude_cdf_csv)
from prunecast.data import SplitSpec, make_windows, synth_dataset
from prunecast.model import Forecaster, ForecasterConfig
from prunecast.training import TrainConfig, finetune

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

cfg = ForecasterConfig(layers=2, heads=4, d_model=32, d_ffn=64, patch_len=8,
                       context_len=96, horizon=24, activation="relu")
table = synth_dataset("sines", 7, (1200, 4))
spec = SplitSpec(0.8, 0.1, 0.1, context_len=96, horizon=24)
train = make_windows(table, spec, "train")
val = make_windows(table, spec, "val")

model = Forecaster(cfg, seed=3)
model, _ = finetune(model, train, val,
                    TrainConfig(lr=3e-3, batch_size=128, max_epochs=3,
                                patience=3, seed=0))

head_stats = collect_head_norms(model, train)
act_stats = collect_activation_probs(model, train)
for li, s in enumerate(head_stats):
    ratios = ", ".join(f"{m:.3f}" for m in s.means())
    print(f"layer {li} mean head output/residual norms: [{ratios}]")
for li, frac in enumerate(sparse_channel_fraction(act_stats, 0.05)):
    print(f"layer {li} FFN channels active <5% of the time: {frac:.1%}")

thresholds, fractions = magnitude_cdf(model, "column")
k = np.searchsorted(thresholds, 0.1)
print(f"\nweight columns with norm below 10% of the max: {fractions[k]:.1%}")

write_head_norms_csv(str(out / "head_norms.csv"), head_stats)
write_ffn_probs_csv(str(out / "ffn_probs.csv"), act_stats)
write_magnitude_cdf_csv(str(out / "magnitude_cdf.csv"), model, "column")
print(f"\nCSV reports written under {out}/")
